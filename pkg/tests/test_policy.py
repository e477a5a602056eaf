import math

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError

from tests.fixtures import SUBSET1, record
from ttcompute.core.objects import BackendKind, CheckpointRef
from ttcompute.evaluator.module import SyntheticEvaluator
from ttcompute.evaluator.utils import BehaviorTag, parse_tag
from ttcompute.exceptions import (
    BackendError,
    BackendUnreachableError,
    ConfigError,
    EmptyRolloutsError,
    InputError,
    UnknownCheckpointError,
    UnknownTaskError,
)
from ttcompute.policy.module import (
    RemotePolicy,
    SyntheticPolicy,
    create_policy,
)
from ttcompute.policy.objects import (
    Archetype,
    ArchetypeClass,
    PolicyKind,
    PolicyProfile,
    SampleBatchRequest,
    ScoredRollout,
    SyntheticPolicyState,
)
from ttcompute.policy.scenario import load_scenario


@pytest.fixture
def scenario():
    return load_scenario("stock")


@pytest.fixture
def policy(scenario):
    return SyntheticPolicy.from_scenario(scenario, SUBSET1)


@pytest.fixture
def evaluator(scenario):
    return SyntheticEvaluator(scenario.baseline_times(SUBSET1))


def batch(policy, task_id=4, K=32, seed=42, step=0, temperature=0.25, checkpoint=None):
    return policy.draw_samples(
        SampleBatchRequest(
            checkpoint=checkpoint or policy.root("base"),
            task_id=task_id,
            K=K,
            temperature=temperature,
            seed=seed,
            step=step,
        )
    )


def scored(samples, evaluator, reward=None):
    evaluated = evaluator.evaluate_samples(samples)
    return [
        ScoredRollout(
            sample=s, reward=reward(s) if reward else s.speedup if s.correct else 0.0
        )
        for s in evaluated
    ]


# scenario


def test_stock_scenario(scenario):
    assert scenario.baseline_time(4) == 2.31
    assert scenario.baseline_time(99) == scenario.default_baseline_time
    assert "Task 12" in scenario.prompt(12)
    state = scenario.state(SUBSET1)
    assert set(state.tasks) == set(SUBSET1)
    assert state.class_mass(ArchetypeClass.EXPERT_TAIL) == pytest.approx(0.05)


def test_unknown_scenario():
    with pytest.raises(ConfigError):
        load_scenario("no-such-scenario")


def test_scenario_from_path(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(
        "name: tiny\n"
        "archetypes:\n"
        "  - {name: only, archetype_class: naive_mode, weight: 1.0,\n"
        "     mean_logprob: -10.0, logprob_spread: 1.0, correct_rate: 1.0}\n"
        "tasks:\n"
        "  7: {baseline_time: 3.0, prompt: custom}\n",
        encoding="utf-8",
    )
    scenario = load_scenario(path)
    assert scenario.baseline_time(7) == 3.0
    assert scenario.prompt(7) == "custom"


def test_invalid_scenario(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("name: bad\narchetypes: []\nsharpening: 2.0\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_scenario(path)


def test_expert_tail_must_be_less_probable(scenario):
    archetypes = scenario.state([4]).tasks[4]
    expert = archetypes[1].model_copy(update={"mean_logprob": -10.0})
    with pytest.raises(ValidationError):
        SyntheticPolicyState(tasks={4: (archetypes[0], expert, archetypes[2])})


def test_mixture_weights_must_sum_to_one(scenario):
    archetypes = scenario.state([4]).tasks[4]
    with pytest.raises(ValidationError):
        SyntheticPolicyState(tasks={4: archetypes[:2]})


# sampling


def test_sampling_is_deterministic(policy):
    assert batch(policy) == batch(policy)
    assert batch(policy) != batch(policy, step=1)
    assert batch(policy) != batch(policy, seed=43)


def test_samples_carry_consistent_metadata(policy):
    samples = batch(policy, task_id=5, K=16)
    assert [s.sample_index for s in samples] == list(range(16))
    assert all(s.task_id == 5 and s.seed == 42 for s in samples)
    assert all(s.total_logprob <= 0 for s in samples)
    assert all(parse_tag(s.code) is not None for s in samples)
    assert not any(s.evaluated for s in samples)


def test_zero_temperature_collapses_to_modes(policy, scenario):
    modes = {a.mean_logprob for a in scenario.archetypes}
    samples = batch(policy, K=64, temperature=0.0)
    assert {s.total_logprob for s in samples} <= modes


def test_draw_samples_many_keeps_order(policy):
    requests = [
        SampleBatchRequest(checkpoint=policy.root("base"), task_id=t, K=4)
        for t in SUBSET1
    ]
    serial = policy.draw_samples_many(requests)
    parallel = policy.draw_samples_many(requests, workers=4)
    assert serial == parallel
    assert [b[0].task_id for b in parallel] == list(SUBSET1)


def test_unknown_task(policy):
    with pytest.raises(UnknownTaskError):
        batch(policy, task_id=99)


def test_unknown_checkpoint(policy):
    with pytest.raises(UnknownCheckpointError):
        batch(policy, checkpoint=CheckpointRef(id="missing"))


# scoring


def test_nll_of_own_sample_matches_logprob(policy):
    root = policy.root("base")
    for sample in batch(policy, K=8):
        assert policy.score_nll(root, sample) == pytest.approx(-sample.total_logprob)


def test_untagged_sample_keeps_its_logprob(policy):
    sample = record(logprob=-33.0)
    assert policy.score_nll(policy.root("base"), sample) == 33.0


def test_token_logprobs_sum_to_sequence(policy):
    root = policy.root("base")
    sample = batch(policy, K=1)[0]
    scores = policy.token_logprobs(root, sample)
    assert len(scores.logprobs) == sample.token_count
    assert sum(scores.logprobs) == pytest.approx(sample.total_logprob)
    assert scores.context_tokens > 0


def test_teacher_on_student_prompt_matches_student(policy):
    root = policy.root("base")
    sample = batch(policy, K=1)[0]
    student = policy.token_logprobs(root, sample)
    teacher = policy.teacher_logprobs(root, sample, policy.task_prompt(4))
    assert teacher.logprobs == student.logprobs


def test_teacher_feedback_favors_fast_correct(policy, evaluator):
    root = policy.root("base")
    samples = evaluator.evaluate_samples(batch(policy, K=32))
    context = policy.task_prompt(4) + "\n\nExecution feedback:\ncorrect: yes"
    for sample in samples:
        student = sum(policy.token_logprobs(root, sample).logprobs)
        teacher = sum(policy.teacher_logprobs(root, sample, context).logprobs)
        if sample.correct and sample.speedup > 1.0:
            assert teacher >= student - 1e-9
        elif not sample.correct:
            assert teacher < student


# adaptation


def test_adapt_validates_input(policy, evaluator):
    root = policy.root("base")
    with pytest.raises(EmptyRolloutsError):
        policy.adapt(root, [], 1e-5)
    raw = [ScoredRollout(sample=s, reward=0.0) for s in batch(policy, K=2)]
    with pytest.raises(InputError):
        policy.adapt(root, raw, 1e-5)
    with pytest.raises(InputError):
        policy.adapt(root, scored(batch(policy, K=2), evaluator), -1.0)


def test_zero_learning_rate_keeps_state(policy, evaluator):
    root = policy.root("base")
    outcome = policy.adapt(root, scored(batch(policy), evaluator), 0.0)
    assert outcome.new_checkpoint.id.startswith("syn-")
    assert policy.state(outcome.new_checkpoint) == policy.state(root)


def test_adapt_is_deterministic(policy, evaluator):
    root = policy.root("base")
    rollouts = scored(batch(policy), evaluator)
    first = policy.adapt(root, rollouts, 1e-5)
    second = policy.adapt(root, rollouts, 1e-5)
    assert first.new_checkpoint == second.new_checkpoint
    assert first.new_checkpoint.adapted_on == (4,)
    assert first.new_checkpoint.step == 1
    assert first.rollouts_consumed == 32


def test_adapt_contracts_every_spread(policy, evaluator, scenario):
    root = policy.root("base")
    child = policy.adapt(root, scored(batch(policy), evaluator), 1e-5).new_checkpoint
    before, after = policy.state(root), policy.state(child)
    for task_id in SUBSET1:
        for old, new in zip(before.tasks[task_id], after.tasks[task_id]):
            assert new.logprob_spread == pytest.approx(
                old.logprob_spread * scenario.sharpening
            )
    # Only the adapted task moves its weights.
    assert after.tasks[5] != before.tasks[5]
    assert [a.weight for a in after.tasks[5]] == [a.weight for a in before.tasks[5]]


def test_rewarded_archetype_gains_mass(policy, evaluator):
    root = policy.root("base")

    def naive_only(sample):
        return 1.0 if parse_tag(sample.code).arch == "naive_mode" else 0.0

    rollouts = scored(batch(policy, K=64), evaluator, reward=naive_only)
    child = policy.adapt(root, rollouts, 1e-5).new_checkpoint
    before = policy.state(root).archetype(4, "naive_mode")
    after = policy.state(child).archetype(4, "naive_mode")
    assert after.weight > before.weight
    # The stock scenario keeps modal logprobs fixed.
    assert after.mean_logprob == before.mean_logprob


def two_archetype_state(naive=0.9, **knobs):
    return SyntheticPolicyState(
        tasks={
            4: (
                Archetype(
                    name="naive_mode",
                    archetype_class=ArchetypeClass.NAIVE_MODE,
                    weight=naive,
                    mean_logprob=-45.0,
                    logprob_spread=6.0,
                    correct_rate=0.9,
                ),
                Archetype(
                    name="expert_tail",
                    archetype_class=ArchetypeClass.EXPERT_TAIL,
                    weight=1.0 - naive,
                    mean_logprob=-80.0,
                    logprob_spread=8.0,
                    correct_rate=0.5,
                ),
            )
        },
        **knobs,
    )


def tagged(arch, reward, index):
    tag = BehaviorTag(
        arch=arch, compiled=True, correct=reward > 0, speedup=reward, key=index
    )
    sample = record(sample_index=index, speedup=max(reward, 0.1))
    return ScoredRollout(
        sample=sample.model_copy(update={"code": tag.render()}), reward=reward
    )


def naive_and_expert_batch():
    rollouts = [tagged("naive_mode", 1.3, i) for i in range(9)]
    return rollouts + [tagged("expert_tail", 5.0, 9)]


def adapted_weights(state, rollouts, learning_rate=1e-5):
    policy = SyntheticPolicy(state)
    child = policy.adapt(policy.root(), rollouts, learning_rate).new_checkpoint
    return policy, policy.state(child)


def test_adapt_matches_weights_computed_by_hand():
    # eta = 1e-5 * 5e4 = 0.5; batch mean (9 * 1.3 + 5.0) / 10 = 1.67.
    _, state = adapted_weights(two_archetype_state(), naive_and_expert_batch())
    naive, expert = state.tasks[4]
    assert [naive.weight, expert.weight] == pytest.approx([0.586, 0.414], abs=5e-4)

    expected = np.array(
        [0.9 * math.exp(0.5 * (1.3 - 1.67)), 0.1 * math.exp(0.5 * (5.0 - 1.67))]
    )
    expected = expected / expected.sum()
    assert [naive.weight, expert.weight] == pytest.approx(list(expected), rel=1e-9)
    assert naive.logprob_spread == pytest.approx(6.0 * 0.9)
    shift = 10.0 * math.log(expected[0] / 0.9)
    assert naive.mean_logprob == pytest.approx(-45.0 + shift)



def test_reward_clip_is_opt_in():
    assert two_archetype_state().reward_clip is None
    clipped = two_archetype_state(reward_clip=1.2)
    _, state = adapted_weights(clipped, naive_and_expert_batch())
    # Both archetypes earn the cap, so neither beats the batch mean.
    assert [a.weight for a in state.tasks[4]] == pytest.approx([0.9, 0.1])


def test_absent_archetype_earns_nothing():
    rollouts = [tagged("naive_mode", 1.3, i) for i in range(10)]
    _, state = adapted_weights(two_archetype_state(), rollouts)
    expert = 0.1 * math.exp(0.5 * (0.0 - 1.3))
    assert state.archetype(4, "expert_tail").weight == pytest.approx(
        expert / (0.9 + expert)
    )


def test_naive_outscoring_the_batch_drains_failed_experts():
    rollouts = [tagged("naive_mode", 1.3, i) for i in range(8)]
    rollouts += [tagged("expert_tail", 0.0, 8), tagged("expert_tail", 0.0, 9)]
    _, state = adapted_weights(two_archetype_state(), rollouts)
    assert state.archetype(4, "naive_mode").weight > 0.9
    assert state.archetype(4, "expert_tail").weight < 0.1


def test_repeated_updates_converge_on_the_best_archetype():
    policy = SyntheticPolicy(two_archetype_state(naive=0.5))
    checkpoint = policy.root()
    rollouts = [tagged("naive_mode", 2.0, 0), tagged("expert_tail", 1.0, 1)]
    for _ in range(20):
        checkpoint = policy.adapt(checkpoint, rollouts, 1e-4).new_checkpoint
    assert policy.state(checkpoint).archetype(4, "naive_mode").weight > 0.999


def test_huge_rewards_keep_weights_finite():
    rollouts = [tagged("naive_mode", 1.0, 0), tagged("expert_tail", 5000.0, 1)]
    _, state = adapted_weights(two_archetype_state(), rollouts, 1e-3)
    weights = [a.weight for a in state.tasks[4]]
    assert all(math.isfinite(w) for w in weights)
    assert weights == pytest.approx([0.0, 1.0])


ARCHETYPE_NAMES = ("naive_mode", "expert_tail", "broken")


@given(
    st.lists(st.floats(min_value=0.05, max_value=1.0), min_size=3, max_size=3),
    st.lists(
        st.tuples(
            st.sampled_from(ARCHETYPE_NAMES),
            st.floats(min_value=0.0, max_value=200.0),
        ),
        min_size=1,
        max_size=40,
    ),
    st.floats(min_value=1e-7, max_value=1e-4),
)
def test_lowest_earning_archetype_never_gains(raw_weights, draws, learning_rate):
    total = sum(raw_weights)
    classes = (
        ArchetypeClass.NAIVE_MODE,
        ArchetypeClass.EXPERT_TAIL,
        ArchetypeClass.BROKEN,
    )
    mixture = tuple(
        Archetype(
            name=name,
            archetype_class=kind,
            weight=raw / total,
            mean_logprob=-45.0 - 20.0 * i,
            logprob_spread=5.0,
            correct_rate=0.5,
        )
        for i, (name, kind, raw) in enumerate(
            zip(ARCHETYPE_NAMES, classes, raw_weights)
        )
    )
    state = SyntheticPolicyState(tasks={4: mixture}, logprob_sensitivity=0.0)
    rollouts = [tagged(name, reward, i) for i, (name, reward) in enumerate(draws)]
    _, after = adapted_weights(state, rollouts, learning_rate)

    means = {
        name: np.mean([r for n, r in draws if n == name] or [0.0])
        for name in ARCHETYPE_NAMES
    }
    lowest = min(means.values())
    for old, new in zip(mixture, after.tasks[4]):
        if means[old.name] == lowest:
            assert new.weight <= old.weight * (1 + 1e-9)


def test_create_policy_synthetic(scenario):
    policy = create_policy(PolicyProfile(), scenario, SUBSET1, root_id="origin")
    assert policy.root("origin").id == "origin"


# remote


def remote(handler, **profile):
    profile = PolicyProfile(
        kind=PolicyKind.REMOTE,
        endpoint="http://policy",
        poll_interval=0,
        **profile,
    )
    return RemotePolicy(profile, transport=httpx.MockTransport(handler))


def sample_response(K):
    return {
        "samples": [
            {"code": f"kernel {i}", "token_count": 900 + i, "total_logprob": -40.0 - i}
            for i in range(K)
        ]
    }


def test_remote_sample():
    def handler(request):
        assert request.url.path == "/sample"
        return httpx.Response(200, json=sample_response(3))

    policy = remote(handler)
    root = policy.root("ckpt-0")
    assert root.backend_kind == BackendKind.REMOTE
    samples = policy.draw_samples(
        SampleBatchRequest(checkpoint=root, task_id=4, K=3, seed=7)
    )
    assert [s.sample_index for s in samples] == [0, 1, 2]
    assert samples[2].total_logprob == -42.0
    assert samples[0].seed == 7


def test_remote_sample_count_mismatch():
    policy = remote(lambda request: httpx.Response(200, json=sample_response(2)))
    with pytest.raises(BackendError):
        policy.draw_samples(
            SampleBatchRequest(checkpoint=policy.root("c"), task_id=4, K=3)
        )


def test_remote_404_mapping():
    def handler(request):
        if request.url.path == "/sample":
            return httpx.Response(404, json={"error": "unknown_task"})
        return httpx.Response(404, text="not found")

    policy = remote(handler)
    root = policy.root("c")
    with pytest.raises(UnknownTaskError):
        policy.draw_samples(SampleBatchRequest(checkpoint=root, task_id=4, K=1))
    with pytest.raises(UnknownCheckpointError):
        policy.score_nll(root, record())


def test_remote_unreachable():
    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    with pytest.raises(BackendUnreachableError):
        remote(handler).score_nll(CheckpointRef(id="c"), record())


def test_remote_scores():
    def handler(request):
        if request.url.path == "/score":
            return httpx.Response(200, json={"nll": 41.5})
        return httpx.Response(
            200, json={"logprobs": [-0.5, -0.25], "context_tokens": 12}
        )

    policy = remote(handler)
    root = policy.root("c")
    assert policy.score_nll(root, record()) == 41.5
    scores = policy.teacher_logprobs(root, record(), "context")
    assert scores.logprobs == [-0.5, -0.25]
    assert scores.context_tokens == 12


def test_remote_adapt_polls_until_done():
    polls = []

    def handler(request):
        if request.method == "POST":
            return httpx.Response(200, json={"job_id": "j1"})
        polls.append(request.url.path)
        if len(polls) < 3:
            return httpx.Response(200, json={"status": "running"})
        return httpx.Response(200, json={"new_checkpoint_id": "ckpt-1"})

    policy = remote(handler)
    rollouts = [ScoredRollout(sample=record(task_id=5), reward=1.5)]
    outcome = policy.adapt(policy.root("ckpt-0"), rollouts, 1e-5)
    assert polls == ["/adapt/j1"] * 3
    assert outcome.new_checkpoint.id == "ckpt-1"
    assert outcome.new_checkpoint.adapted_on == (5,)


def test_remote_adapt_gives_up():
    def handler(request):
        if request.method == "POST":
            return httpx.Response(200, json={"job_id": "j1"})
        return httpx.Response(200, json={"status": "running"})

    policy = remote(handler, poll_limit=2)
    rollouts = [ScoredRollout(sample=record(), reward=1.0)]
    with pytest.raises(BackendError):
        policy.adapt(policy.root("c"), rollouts, 1e-5)


def test_remote_adapt_job_error():
    def handler(request):
        if request.method == "POST":
            return httpx.Response(200, json={"job_id": "j1"})
        return httpx.Response(200, json={"error": "out of memory"})

    policy = remote(handler)
    with pytest.raises(BackendError):
        policy.adapt(policy.root("c"), [ScoredRollout(sample=record(), reward=1)], 1)


@pytest.mark.parametrize(
    "body",
    [
        {"samples": [{"code": "kernel", "total_logprob": -40.0}]},
        {"sample": []},
        {"samples": [{"code": "kernel", "token_count": "many", "total_logprob": 0}]},
        ["kernel"],
    ],
)
def test_remote_malformed_sample_body(body):
    policy = remote(lambda request: httpx.Response(200, json=body))
    with pytest.raises(BackendError, match="/sample"):
        policy.draw_samples(
            SampleBatchRequest(checkpoint=policy.root("c"), task_id=4, K=1)
        )


def test_remote_malformed_bodies_are_backend_errors():
    def handler(request):
        if request.url.path == "/score":
            return httpx.Response(200, json={"loss": 41.5})
        if request.url.path == "/teacher_logprobs":
            return httpx.Response(200, json={"logprobs": "none"})
        if request.url.path == "/adapt":
            return httpx.Response(200, json={"job": "j1"})
        return httpx.Response(200, text="<html>busy</html>")

    policy = remote(handler)
    root = policy.root("c")
    with pytest.raises(BackendError, match="/score"):
        policy.score_nll(root, record())
    with pytest.raises(BackendError, match="/teacher_logprobs"):
        policy.teacher_logprobs(root, record(), "context")
    with pytest.raises(BackendError, match="/adapt"):
        policy.adapt(root, [ScoredRollout(sample=record(), reward=1.0)], 1e-5)
    with pytest.raises(BackendError, match="invalid JSON"):
        policy.token_logprobs(root, record())


def test_remote_needs_endpoint():
    with pytest.raises(ConfigError):
        RemotePolicy(PolicyProfile(kind=PolicyKind.REMOTE))
