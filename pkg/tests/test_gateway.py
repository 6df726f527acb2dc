import json
import threading
from concurrent.futures import ThreadPoolExecutor

import pytest
from hypothesis import given, strategies as st

from refcheck.backends import CallableBackend, RecordingBackend, ReplayBackend
from refcheck.errors import (
    BackendTimeout,
    BackendUnavailable,
    ConfigError,
    MalformedResponse,
    ReplayMiss,
    TransientBackendError,
)
from refcheck.gateway import (
    CACHE_MAGIC,
    BackendPolicy,
    CompletionCache,
    Gateway,
    PromptRequest,
    RawCompletion,
    UsageMeter,
    cache_key,
)

from conftest import FakeBackend


def req(**kw):
    base = dict(prompt_text="Does X exist?", temperature=1.0, n_samples=2, max_tokens=16, model_id="m")
    base.update(kw)
    return PromptRequest(**base)


class TestPromptRequest:
    def test_temperature_zero_forces_single_sample(self):
        assert req(temperature=0, n_samples=10).n_samples == 1

    @pytest.mark.parametrize(
        "kw", [dict(prompt_text=""), dict(n_samples=0), dict(max_tokens=0), dict(temperature=2.5), dict(temperature=-0.1)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            req(**kw)


class TestCacheKey:
    def test_identical_requests(self):
        assert cache_key(req()) == cache_key(req())

    def test_temperature_changes_key(self):
        assert cache_key(req(temperature=0.0)) != cache_key(req(temperature=1.0))

    def test_whitespace_is_not_normalized(self):
        assert cache_key(req(prompt_text="Does X exist?")) != cache_key(req(prompt_text="Does X exist? "))

    def test_int_and_float_temperature_agree(self):
        assert cache_key(req(temperature=1)) == cache_key(req(temperature=1.0))

    def test_seed_hint_not_part_of_key(self):
        assert cache_key(req(seed_hint=1)) == cache_key(req(seed_hint=2))

    @pytest.mark.parametrize(
        "field,value",
        [("model_id", "other"), ("prompt_text", "Does Y exist?"), ("n_samples", 3), ("max_tokens", 17), ("temperature", 0.5)],
    )
    def test_every_field_matters(self, field, value):
        assert cache_key(req()) != cache_key(req(**{field: value}))

    @given(st.text(min_size=1), st.text(min_size=1))
    def test_distinct_prompts_distinct_keys(self, a, b):
        if a != b:
            assert cache_key(req(prompt_text=a)) != cache_key(req(prompt_text=b))


def test_replay_identity_lookup():
    r = req()
    backend = ReplayBackend({cache_key(r): RawCompletion(["Yes", "No"])})
    batch = Gateway(backend).complete(r)
    assert batch.completions == ("Yes", "No")
    assert batch.provenance == "replay"


def test_replay_miss_is_reported_with_digest():
    gw = Gateway(ReplayBackend({}), policy=BackendPolicy(max_retries=0))
    with pytest.raises(ReplayMiss) as info:
        gw.complete(req())
    assert info.value.request_digest == cache_key(req())


def test_replay_from_file(tmp_path):
    r = req()
    path = tmp_path / "replay.jsonl"
    path.write_text(json.dumps({"digest": cache_key(r), "completions": ["a", "b"], "prompt_tokens": 4}) + "\n")
    assert ReplayBackend.from_file(path).generate(r).completions == ["a", "b"]


def test_second_call_hits_cache(tmp_path, fake_backend):
    gw = Gateway(fake_backend, CompletionCache(tmp_path))
    first = gw.complete(req())
    second = gw.complete(req())
    assert first.provenance == "live" and second.provenance == "cache"
    assert first.completions == second.completions
    assert (first.prompt_tokens, first.completion_tokens) == (second.prompt_tokens, second.completion_tokens)
    assert fake_backend.calls == 1


def test_cache_is_byte_stable(tmp_path, fake_backend):
    gw = Gateway(fake_backend, CompletionCache(tmp_path))
    gw.complete(req())
    path = next(tmp_path.glob("*.rck"))
    before = path.read_bytes()
    assert before.startswith(CACHE_MAGIC.encode() + b"\n")
    assert gw.complete(req()).to_dict() == Gateway(FakeBackend(), CompletionCache(tmp_path)).complete(req()).to_dict()
    assert path.read_bytes() == before


@pytest.mark.parametrize("garbage", ["", "RCK0\n{}", "RCK1\nnot json", 'RCK1\n{"batch": {}}'])
def test_corrupt_cache_record_is_a_miss(tmp_path, fake_backend, garbage):
    cache = CompletionCache(tmp_path)
    cache.path_for(cache_key(req())).write_text(garbage)
    batch = Gateway(fake_backend, cache).complete(req())
    assert batch.provenance == "live"
    assert fake_backend.calls == 1
    assert cache.get(cache_key(req())) is not None


def test_live_batch_stored_before_return(tmp_path, fake_backend):
    cache = CompletionCache(tmp_path)
    batch = Gateway(fake_backend, cache).complete(req())
    assert cache.get(batch.request_digest).completions == batch.completions


def test_retries_transient_then_succeeds():
    backend = FakeBackend(failures=2, error=TransientBackendError("503"))
    sleeps = []
    gw = Gateway(backend, policy=BackendPolicy(max_retries=3, backoff_base_ms=100), sleep=sleeps.append)
    assert gw.complete(req()).completions == ("Yes", "Yes")
    assert backend.calls == 3
    assert sleeps == [0.1, 0.2]


def test_gives_up_after_max_retries():
    backend = FakeBackend(failures=10, error=TransientBackendError("503"))
    gw = Gateway(backend, policy=BackendPolicy(max_retries=2, backoff_base_ms=0), sleep=lambda s: None)
    with pytest.raises(BackendUnavailable) as info:
        gw.complete(req())
    assert backend.calls == 3
    assert info.value.request_digest == cache_key(req())


def test_timeout_surfaces_as_timeout():
    backend = FakeBackend(failures=10, error=BackendTimeout("slow"))
    gw = Gateway(backend, policy=BackendPolicy(max_retries=1, backoff_base_ms=0), sleep=lambda s: None)
    with pytest.raises(BackendTimeout):
        gw.complete(req())


def test_unhelpful_completions_are_not_retried():
    backend = FakeBackend(answer=lambda r: [""] * r.n_samples)
    gw = Gateway(backend, policy=BackendPolicy(max_retries=3))
    assert gw.complete(req()).completions == ("", "")
    assert backend.calls == 1


def test_wrong_sample_count_is_malformed():
    backend = FakeBackend(answer=lambda r: ["only one"])
    with pytest.raises(MalformedResponse) as info:
        Gateway(backend).complete(req(n_samples=3))
    assert info.value.request_digest == cache_key(req(n_samples=3))


def test_bounded_parallelism():
    backend = FakeBackend(delay=0.02)
    gw = Gateway(backend, policy=BackendPolicy(max_in_flight=3))
    with ThreadPoolExecutor(max_workers=12) as pool:
        list(pool.map(lambda i: gw.complete(req(prompt_text=f"p{i}")), range(30)))
    assert backend.calls == 30
    assert backend.peak <= 3
    assert gw.stats.max_concurrent <= 3


def test_concurrent_same_key_single_backend_call(tmp_path):
    backend = FakeBackend(delay=0.02)
    gw = Gateway(backend, CompletionCache(tmp_path), BackendPolicy(max_in_flight=8))
    with ThreadPoolExecutor(max_workers=8) as pool:
        batches = list(pool.map(lambda i: gw.complete(req()), range(8)))
    assert backend.calls == 1
    assert len({b.completions for b in batches}) == 1


def test_live_call_counter_ignores_replay():
    r = req()
    gw = Gateway(ReplayBackend({cache_key(r): RawCompletion(["a", "b"])}))
    gw.complete(r)
    assert gw.stats.live_calls == 0 and gw.stats.backend_calls == 1


def test_usage_meter_sums_tokens(fake_backend):
    meter = UsageMeter(Gateway(fake_backend))
    meter.complete(req())
    meter.complete(req(prompt_text="other"))
    assert meter.totals() == {"batches": 2, "prompt_tokens": 6, "completion_tokens": 4}


def test_recording_backend_round_trips(tmp_path):
    rec = RecordingBackend(CallableBackend(lambda r: ["x"] * r.n_samples))
    Gateway(rec).complete(req())
    rec.save(tmp_path / "r.jsonl")
    replay = ReplayBackend.from_file(tmp_path / "r.jsonl")
    assert Gateway(replay).complete(req()).completions == ("x", "x")


def test_policy_validation():
    with pytest.raises(ConfigError):
        BackendPolicy(max_in_flight=0)
    with pytest.raises(ConfigError):
        BackendPolicy(max_retries=-1)
