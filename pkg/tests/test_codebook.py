"""Unit tests for vector quantization."""

import pytest
import torch

from libs.exceptions import ValidationError
from networks.codebook import Codebook, codebook_usage, straight_through, vq_loss, vq_loss_terms


@pytest.fixture
def codebook() -> Codebook:
    torch.manual_seed(0)
    return Codebook(codebook_size=8, dim=4)


@pytest.mark.unit
def test_entries_are_unit_norm(codebook):
    """Test l2 codes are stored on the unit sphere."""
    assert torch.allclose(codebook.entries.norm(dim=-1), torch.ones(8), atol=1e-6)


@pytest.mark.unit
def test_quantize_returns_own_entries(codebook):
    """Test quantizing a codebook entry selects that entry."""
    codes = codebook.codes().detach()

    result = codebook.quantize(codes[[3, 5, 0]])

    assert result.indices.tolist() == [3, 5, 0]
    assert torch.allclose(result.vectors, codes[[3, 5, 0]])


@pytest.mark.unit
def test_quantize_nearest_entry(codebook):
    """Test quantization matches a brute-force nearest-neighbor search."""
    embeddings = torch.randn(2, 3, 4, generator=torch.Generator().manual_seed(1))

    result = codebook.quantize(embeddings)

    brute = torch.cdist(embeddings.reshape(-1, 4), codebook.codes().detach()).argmin(dim=1)
    assert result.indices.shape == (2, 3)
    assert torch.equal(result.indices.reshape(-1), brute)


@pytest.mark.unit
def test_quantize_ties_pick_lowest_index():
    """Test equidistant entries resolve to the lowest index."""
    codebook = Codebook(codebook_size=2, dim=2, l2_codes=False)
    with torch.no_grad():
        codebook.entries.copy_(torch.tensor([[1.0, 0.0], [-1.0, 0.0]]))

    result = codebook.quantize(torch.tensor([[0.0, 1.0]]))

    assert result.indices.tolist() == [0]


@pytest.mark.unit
def test_quantize_swapped_entry_ties_pick_lowest_index():
    """Test an entry equal to another with two coordinates swapped never wins a tie on unit codes."""
    codebook = Codebook(codebook_size=8, dim=4, l2_codes=True)
    entries = torch.tensor(
        [
            [-1.0, 0.0, 0.0, 0.0],
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [2.0, 4.0, 1.0, 2.0],
            [0.0, 0.0, 0.0, -1.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [2.0, 1.0, 4.0, 2.0],
        ]
    )
    with torch.no_grad():
        codebook.entries.copy_(entries)
    generator = torch.Generator().manual_seed(3)
    queries = torch.empty(400, 4)
    queries[:, 0] = 0.3 + 0.2 * torch.rand(400, generator=generator)
    queries[:, 1] = 0.4 + 0.2 * torch.rand(400, generator=generator)
    queries[:, 2] = queries[:, 1]
    queries[:, 3] = 0.3 + 0.2 * torch.rand(400, generator=generator)

    result = codebook.quantize(queries)

    assert torch.all(result.indices == 3)


@pytest.mark.unit
@pytest.mark.parametrize("l2_codes", [True, False])
def test_quantize_matches_brute_force_over_codebooks(l2_codes):
    """Test quantization agrees with an exhaustive squared-difference search on several random codebooks."""
    for seed in range(5):
        torch.manual_seed(seed)
        codebook = Codebook(codebook_size=16, dim=6, l2_codes=l2_codes)
        embeddings = torch.randn(64, 6, generator=torch.Generator().manual_seed(100 + seed))

        result = codebook.quantize(embeddings)

        codes = codebook.codes().detach().double()
        brute = (embeddings.double()[:, None, :] - codes[None, :, :]).pow(2).sum(dim=-1).argmin(dim=1)
        assert torch.equal(result.indices, brute), seed


@pytest.mark.unit
def test_unit_codes_nearest_is_largest_dot_product():
    """Test on unit codes the nearest entry is the one with the largest dot product."""
    torch.manual_seed(7)
    codebook = Codebook(codebook_size=32, dim=8, l2_codes=True)
    embeddings = torch.randn(128, 8, generator=torch.Generator().manual_seed(8))

    result = codebook.quantize(embeddings)

    by_dot = (embeddings.double() @ codebook.codes().detach().double().T).argmax(dim=1)
    assert torch.equal(result.indices, by_dot)


@pytest.mark.unit
def test_quantize_rejects_non_finite(codebook):
    """Test non-finite embeddings are rejected."""
    with pytest.raises(ValidationError):
        codebook.quantize(torch.tensor([[float("nan"), 0.0, 0.0, 0.0]]))


@pytest.mark.unit
def test_quantize_rejects_wrong_width(codebook):
    """Test embeddings must match the codebook width."""
    with pytest.raises(ValidationError):
        codebook.quantize(torch.zeros(3, 5))


@pytest.mark.unit
def test_lookup_range(codebook):
    """Test lookup rejects indices outside [0, K)."""
    assert codebook.lookup(torch.tensor([0, 7])).shape == (2, 4)

    with pytest.raises(ValidationError):
        codebook.lookup(torch.tensor([8]))
    with pytest.raises(ValidationError):
        codebook.lookup(torch.tensor([-1]))


@pytest.mark.unit
def test_straight_through_gradient():
    """Test the straight-through estimator forwards the vectors and passes gradients unchanged."""
    embeddings = torch.randn(5, 4, requires_grad=True)
    vectors = torch.randn(5, 4)

    out = straight_through(embeddings, vectors)
    (out * torch.arange(4.0)).sum().backward()

    assert torch.allclose(out, vectors)
    assert torch.allclose(embeddings.grad, torch.arange(4.0).expand(5, 4))


@pytest.mark.unit
def test_vq_loss_gradients():
    """Test the codebook term moves only vectors and the commitment term only embeddings."""
    embeddings = torch.tensor([[1.0, 0.0]], requires_grad=True)
    vectors = torch.tensor([[0.0, 1.0]], requires_grad=True)

    codebook_term, commitment_term = vq_loss_terms(embeddings, vectors)
    codebook_term.backward(retain_graph=True)
    assert embeddings.grad is None
    assert torch.allclose(vectors.grad, torch.tensor([[-2.0, 2.0]]))

    vectors.grad = None
    commitment_term.backward()
    assert vectors.grad is None
    assert torch.allclose(embeddings.grad, torch.tensor([[2.0, -2.0]]))


@pytest.mark.unit
def test_vq_loss_value():
    """Test the combined loss weights the commitment term."""
    embeddings = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    vectors = torch.tensor([[0.0, 1.0], [0.0, 0.0]])

    loss = vq_loss(embeddings, vectors, commitment_weight=0.25)

    # Squared distance 2 on one of two cells
    assert torch.isclose(loss, torch.tensor(1.0 + 0.25))


@pytest.mark.unit
def test_codebook_usage_counts_cells():
    """Test the usage histogram sums to the number of cells."""
    indices = torch.tensor([[0, 3], [3, 3]])

    usage = codebook_usage(indices, 5)

    assert usage.tolist() == [1, 0, 0, 3, 0]
    assert int(usage.sum()) == indices.numel()
