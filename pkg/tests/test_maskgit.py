"""Tests for the masked-token prior: sequences, masking, conditioning, training and decoding."""

import math

import pytest
import torch

from libs.exceptions import CheckpointError, ConfigurationError, ValidationError
from libs.schema import ConditionSpec
from networks.maskgit import MaskTransformer
from training.stage1 import Stage1State, reconstruct
from training.stage2 import (
    Stage2State,
    check_vocabulary,
    condition_layout,
    dataset_conditions,
    encode_condition,
    extract_tokens,
    fit_stage2,
    flatten,
    mask_schedule,
    mask_tokens,
    masked_nll,
    sample,
    train_step_stage2,
    unflatten,
    vary,
)

LENGTH = 12
VOCAB = 16


@pytest.fixture
def prior(tiny_config) -> Stage2State:
    return Stage2State.create(tiny_config)


@pytest.mark.unit
def test_flatten_layout():
    """Test sequences run plane by plane, rows then columns inside a plane."""
    grid = torch.zeros(2, 2, 3, dtype=torch.long)
    for i in range(2):
        for j in range(2):
            for p in range(3):
                grid[i, j, p] = 100 * p + 10 * i + j

    sequence = flatten(grid)

    assert sequence.tolist() == [0, 1, 10, 11, 100, 101, 110, 111, 200, 201, 210, 211]


@pytest.mark.unit
def test_unflatten_inverts_flatten():
    """Test a flattened batch unflattens to the original grids."""
    grids = torch.randint(0, VOCAB, (4, 2, 2, 3))

    assert torch.equal(unflatten(flatten(grids), 2, VOCAB), grids)


@pytest.mark.unit
def test_unflatten_rejects_mask_and_bad_length():
    """Test MASK ids and wrong lengths cannot become token grids."""
    sequence = torch.zeros(LENGTH, dtype=torch.long)
    sequence[3] = VOCAB

    with pytest.raises(ValidationError):
        unflatten(sequence, 2, VOCAB)
    with pytest.raises(ValidationError):
        unflatten(torch.zeros(LENGTH - 1, dtype=torch.long), 2, VOCAB)


@pytest.mark.unit
@pytest.mark.parametrize("ratio, expected", [(0.5, 6), (0.01, 1), (1.0, 12), (0.26, 4)])
def test_mask_tokens_count(ratio, expected):
    """Test ceil(ratio * L) positions are masked, at least one."""
    sequence = torch.arange(LENGTH)

    masked, positions = mask_tokens(sequence, ratio, seed=0, mask_id=VOCAB)

    assert int(positions.sum()) == expected
    assert torch.all(masked[positions] == VOCAB)
    assert torch.equal(masked[~positions], sequence[~positions])


@pytest.mark.unit
def test_mask_tokens_seeded_and_validated():
    """Test positions depend only on the seed and ratios must lie in (0, 1]."""
    sequence = torch.arange(LENGTH)

    _, a = mask_tokens(sequence, 0.5, seed=4, mask_id=VOCAB)
    _, b = mask_tokens(sequence, 0.5, seed=4, mask_id=VOCAB)

    assert torch.equal(a, b)
    with pytest.raises(ValidationError):
        mask_tokens(sequence, 0.0, seed=0, mask_id=VOCAB)


@pytest.mark.unit
def test_mask_schedule_values():
    """Test the cosine schedule for a short sequence."""
    assert mask_schedule(12, 3) == [12, 10, 6, 0]


@pytest.mark.unit
@pytest.mark.parametrize("length, steps", [(12, 1), (3, 8), (768, 8), (48, 10)])
def test_mask_schedule_properties(length, steps):
    """Test counts start full, end at zero and strictly decrease while positive."""
    counts = mask_schedule(length, steps)

    assert len(counts) == steps + 1
    assert counts[0] == length and counts[-1] == 0
    for before, after in zip(counts, counts[1:]):
        assert after < before or before == 0


@pytest.mark.unit
def test_masked_nll_ignores_unmasked_positions():
    """Test logits at unmasked positions do not affect the loss."""
    logits = torch.randn(2, LENGTH, VOCAB)
    targets = torch.randint(0, VOCAB, (2, LENGTH))
    mask = torch.zeros(2, LENGTH, dtype=torch.bool)
    mask[:, :4] = True

    changed = logits.clone()
    changed[:, 4:] = 100.0 * torch.randn(2, LENGTH - 4, VOCAB)

    assert torch.isclose(masked_nll(logits, targets, mask), masked_nll(changed, targets, mask))


@pytest.mark.unit
def test_transformer_shapes_and_conditions(tiny_config):
    """Test logits cover the codebook and conditional modes demand a condition."""
    tokens = torch.full((2, LENGTH), VOCAB)

    plain = MaskTransformer(tiny_config)
    assert plain(tokens).shape == (2, LENGTH, VOCAB)

    discrete = MaskTransformer(tiny_config, "discrete", num_classes=4)
    assert discrete.vocab_size == VOCAB + 1 + 4
    assert discrete(tokens, torch.tensor([0, 3])).shape == (2, LENGTH, VOCAB)
    with pytest.raises(ValidationError):
        discrete(tokens)
    with pytest.raises(ValidationError):
        discrete(tokens, torch.tensor([0, 4]))

    continuous = MaskTransformer(tiny_config, "continuous", condition_dim=36)
    assert continuous(tokens, torch.zeros(2, 36)).shape == (2, LENGTH, VOCAB)


@pytest.mark.unit
def test_transformer_rejects_wrong_length(tiny_config):
    """Test sequences of another length are refused."""
    with pytest.raises(ValidationError):
        MaskTransformer(tiny_config)(torch.zeros(1, LENGTH + 1, dtype=torch.long))


@pytest.mark.unit
def test_condition_layout(tiny_config):
    """Test each condition kind maps to its network conditioning."""
    assert condition_layout("none", tiny_config) == ("none", 0, 0)
    assert condition_layout("class", tiny_config) == ("discrete", 4, 0)
    assert condition_layout("time", tiny_config) == ("discrete", 2, 0)
    assert condition_layout("scale", tiny_config) == ("continuous", 0, 36)
    assert condition_layout("semantic", tiny_config) == ("continuous", 0, tiny_config.semantic_dim)
    with pytest.raises(ConfigurationError):
        condition_layout("weather", tiny_config)


@pytest.mark.unit
def test_encode_condition(tiny_config):
    """Test payloads are encoded for the prior's conditioning and mismatches rejected."""
    scale = encode_condition(ConditionSpec(kind="continuous", continuous_vector=(4.0, 2.0, 1.5)), "scale", tiny_config)
    label = encode_condition(ConditionSpec(kind="discrete", discrete_value=2), "class", tiny_config)

    assert scale.value.shape == (36,)
    assert scale.batch(3).shape == (3, 36)
    assert label.batch(2).tolist() == [2, 2]
    assert encode_condition(ConditionSpec(), "none", tiny_config).batch(2) is None

    with pytest.raises(ValidationError):
        encode_condition(ConditionSpec(kind="discrete", discrete_value=5), "class", tiny_config)
    with pytest.raises(ValidationError):
        encode_condition(ConditionSpec(), "class", tiny_config)
    with pytest.raises(ValidationError):
        encode_condition(ConditionSpec(kind="discrete", discrete_value=1), "none", tiny_config)
    with pytest.raises(ValidationError):
        encode_condition(ConditionSpec(kind="continuous", continuous_vector=(1.0, 2.0)), "scale", tiny_config)


@pytest.mark.unit
def test_dataset_conditions(tiny_samples, tiny_config):
    """Test per-sample conditions stack into model input."""
    classes = dataset_conditions(tiny_samples, "class", tiny_config)
    scales = dataset_conditions(tiny_samples, "scale", tiny_config)

    assert classes.tolist() == [s.class_label for s in tiny_samples]
    assert scales.shape == (4, 36)
    assert dataset_conditions(tiny_samples, "none", tiny_config) is None


@pytest.mark.unit
def test_sample_range_and_determinism(prior):
    """Test decoded tokens lie in the codebook and repeat for a fixed seed."""
    first = sample(prior, 3, steps=4, seed=7)
    second = sample(prior, 3, steps=4, seed=7)

    assert first.shape == (3, LENGTH)
    assert first.min() >= 0 and first.max() < VOCAB
    assert torch.equal(first, second)


@pytest.mark.unit
def test_sample_commits_on_schedule(prior):
    """Test committed positions only grow and follow the mask schedule."""
    _, history = sample(prior, 2, steps=3, seed=1, return_history=True)
    remaining = mask_schedule(LENGTH, 3)

    for t, committed in enumerate(history):
        assert committed.sum(dim=1).tolist() == [LENGTH - remaining[t + 1]] * 2
        if t:
            assert torch.all(committed | ~history[t - 1])


@pytest.mark.unit
def test_sample_keeps_unmasked_init_tokens(prior):
    """Test partial resampling never changes positions outside the mask."""
    init = torch.randint(0, VOCAB, (2, LENGTH), generator=torch.Generator().manual_seed(0))
    init_mask = torch.zeros(2, LENGTH, dtype=torch.bool)
    init_mask[:, ::3] = True

    tokens = sample(prior, 2, steps=2, seed=3, init_tokens=init, init_mask=init_mask)

    assert torch.equal(tokens[~init_mask], init[~init_mask])


@pytest.mark.unit
def test_conditional_sampling(tiny_config):
    """Test a class-conditional prior decodes with a class payload."""
    state = Stage2State.create(tiny_config, "class")
    payload = encode_condition(ConditionSpec(kind="discrete", discrete_value=1), "class", tiny_config)

    tokens = sample(state, 2, steps=3, condition=payload, seed=0, temperature=0.0)

    assert tokens.shape == (2, LENGTH)


@pytest.mark.unit
def test_train_step_rejects_foreign_tokens(prior):
    """Test token ids beyond the prior's vocabulary are a configuration error."""
    tokens = torch.full((2, LENGTH), VOCAB + 3)

    with pytest.raises(ConfigurationError):
        train_step_stage2(tokens, None, prior, seed=0)


@pytest.mark.unit
def test_train_step_updates_prior(prior):
    """Test one step returns a finite loss near log K and moves the weights."""
    tokens = torch.randint(0, VOCAB, (4, LENGTH), generator=torch.Generator().manual_seed(0))
    before = [p.detach().clone() for p in prior.model.parameters()]

    loss = train_step_stage2(tokens, None, prior, seed=0)

    assert math.isfinite(loss)
    assert 0.0 < loss < 3.0 * math.log(VOCAB)
    assert prior.step == 1
    assert any(not torch.equal(a, b) for a, b in zip(before, prior.model.parameters()))


@pytest.mark.slow
def test_prior_memorizes_single_sequence(tiny_config):
    """Test the masked objective drops when one sequence is repeated."""
    config = tiny_config.model_copy(
        update={"maskgit": tiny_config.maskgit.model_copy(update={"learning_rate": 3e-3})}
    )
    state = Stage2State.create(config)
    tokens = torch.randint(0, VOCAB, (1, LENGTH), generator=torch.Generator().manual_seed(2))

    losses = fit_stage2(state, tokens, None, steps=200)

    assert sum(losses[-10:]) / 10 < 0.5 * sum(losses[:10]) / 10


@pytest.mark.integration
def test_prior_state_round_trip(tmp_path, tiny_config):
    """Test a saved prior restores its condition kind, counter and weights."""
    state = Stage2State.create(tiny_config, "scale")
    state.step = 5
    state.save(tmp_path / "stage2.gina")

    restored = Stage2State.load(tmp_path / "stage2.gina")

    assert restored.condition_kind == "scale"
    assert restored.step == 5
    for a, b in zip(state.model.parameters(), restored.model.parameters()):
        assert torch.equal(a, b)


@pytest.mark.integration
def test_prior_load_rejects_stage1_file(tmp_path, tiny_config):
    """Test a stage-1 checkpoint cannot be loaded as a prior."""
    Stage1State.create(tiny_config).save(tmp_path / "stage1.gina")

    with pytest.raises(CheckpointError):
        Stage2State.load(tmp_path / "stage1.gina")


@pytest.mark.integration
def test_check_vocabulary(tiny_config):
    """Test a prior over another codebook size cannot decode stage-1 tokens."""
    stage1 = Stage1State.create(tiny_config)
    check_vocabulary(stage1, Stage2State.create(tiny_config))

    with pytest.raises(ConfigurationError) as exc_info:
        check_vocabulary(stage1, Stage2State.create(tiny_config.model_copy(update={"codebook_size": 32})))

    assert exc_info.value.config_key == "codebook_size"


@pytest.mark.integration
def test_extract_tokens_match_reconstruction(tiny_samples, tiny_config):
    """Test extracted sequences are the flattened token grids of EMA reconstructions."""
    stage1 = Stage1State.create(tiny_config)

    sequences = extract_tokens(stage1, tiny_samples, batch_size=tiny_config.train.batch_size)
    grids = torch.stack([torch.from_numpy(r.tokens) for r in reconstruct(stage1, tiny_samples)])

    assert sequences.shape == (4, LENGTH)
    assert torch.equal(sequences, flatten(grids))


@pytest.mark.integration
def test_vary_keeps_unmasked_tokens(tiny_samples, tiny_config):
    """Test variations only resample the masked share of the source tokens."""
    stage1 = Stage1State.create(tiny_config)
    stage2 = Stage2State.create(tiny_config, "class")
    source = tiny_samples[0]
    original = extract_tokens(stage1, [source])[0]

    unchanged = vary(stage1, stage2, source, mask_ratio=0.0, seed=0, n=2)
    varied = vary(stage1, stage2, source, mask_ratio=0.5, seed=5, n=3)
    _, positions = mask_tokens(original, 0.5, 5, stage2.model.mask_id)

    assert torch.equal(unchanged, original.expand(2, -1))
    assert varied.shape == (3, LENGTH)
    assert torch.equal(varied[:, ~positions], original[~positions].expand(3, -1))
