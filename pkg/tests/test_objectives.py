"""Loss values against loop-based oracles, gradient exactness, estimator bias."""

import numpy as np
import pytest

from conftest import finite_difference, max_rel_err
from spex.kernels import basis_matrix, sample_pairs
from spex.numerics import ContractViolation, RngState
from spex.objectives import (
    PenaltyConfig,
    SplitScheme,
    loss_lora_svd,
    loss_rq,
    loss_rq_direct,
    loss_scl,
    loss_vicreg,
)

CFG = PenaltyConfig(mu=10.0, nu=30.0)


class _FixedSplit:
    """Split with explicit halves, for equivariance tests."""

    def __init__(self, h1, h2):
        self._h = (np.asarray(h1), np.asarray(h2))

    def halves(self, m):
        return self._h


def random_batch(seed, m, d, scale=1.0):
    gen = RngState(seed).generator()
    return (
        scale * gen.standard_normal((m, d)),
        scale * gen.standard_normal((m, d)),
    )


# ---------------------------------------------------------------------------
# loop-based value oracles
# ---------------------------------------------------------------------------


def scl_oracle(z, p):
    m = len(z)
    pos = -np.mean([z[i] @ p[i] for i in range(m)])
    neg = np.mean([(z[i] @ p[j]) ** 2 for i in range(m) for j in range(m) if i != j])
    return pos + 0.5 * neg


def lora_oracle(zx, za):
    m = len(zx)
    pos = -2.0 * np.mean([zx[i] @ za[i] for i in range(m)])
    neg = np.mean([(zx[i] @ za[j]) ** 2 for i in range(m) for j in range(m) if i != j])
    return pos + neg


def rq_oracle(z, p, cfg, split):
    m, d = z.shape
    h1, h2 = split.halves(m)
    inv = np.mean([np.sum((z[i] - p[i]) ** 2) for i in range(m)])

    def moments(idx):
        rows = np.vstack([z[idx], p[idx]])
        return rows.T @ rows / m

    c1, c2 = moments(h1), moments(h2)
    var = cfg.mu / d * sum((c1[i, i] - 1) * (c2[i, i] - 1) for i in range(d))
    cov = 0.0
    if d > 1:
        cov = cfg.nu / (d * (d - 1)) * sum(
            c1[i, j] * c2[i, j] for i in range(d) for j in range(d) if i != j
        )
    return inv + var + cov


def vicreg_oracle(z, p, cfg):
    m, d = z.shape
    mu = z.mean(axis=0)
    zt, pt = z - mu, p - mu
    inv = cfg.vicreg_lambda * np.mean([np.sum((zt[i] - pt[i]) ** 2) for i in range(m)])
    cov = zt.T @ zt / (m - 1)
    var = cfg.mu / d * sum(
        max(0.0, 1.0 - np.sqrt(cov[i, i] + cfg.vicreg_eps)) for i in range(d)
    )
    off = 0.0
    if d > 1:
        off = cfg.nu / (d * (d - 1)) * sum(
            cov[i, j] ** 2 for i in range(d) for j in range(d) if i != j
        )
    return inv + var + off


def rq_direct_oracle(z, p, cfg, split):
    m, d = z.shape
    h1, h2 = split.halves(m)
    trace = -np.mean([z[i] @ p[i] for i in range(m)])

    def marginal(idx):
        rows = np.vstack([z[idx], p[idx]])
        return rows.T @ rows / m

    def pair(idx):
        t = z[idx].T @ p[idx] / len(idx)
        return 0.5 * (t + t.T)

    c1, c2 = marginal(h1), marginal(h2)
    var = cfg.mu / d * sum((c1[i, i] - 1) * (c2[i, i] - 1) for i in range(d))
    cross = 0.0
    if d > 1:
        t1, t2 = pair(h1), pair(h2)
        cross = cfg.nu / (d * (d - 1)) * sum(
            t1[i, j] * t2[i, j] for i in range(d) for j in range(d) if i != j
        )
    return trace + var + cross


# ---------------------------------------------------------------------------
# hand-computed spec cases
# ---------------------------------------------------------------------------


class TestSclValues:
    def test_all_zero(self):
        out = loss_scl(np.zeros((3, 2)), np.zeros((3, 2)))
        assert out.value == 0.0

    def test_hand_case(self):
        z = np.array([[1.0], [1.0]])
        p = np.array([[1.0], [-1.0]])
        out = loss_scl(z, p)
        assert out.value == pytest.approx(0.5, abs=1e-15)

    def test_matches_loop_oracle(self):
        z, p = random_batch(0, 7, 3)
        assert loss_scl(z, p).value == pytest.approx(scl_oracle(z, p), rel=1e-12)

    def test_normalize_matches_manual(self):
        z, p = random_batch(1, 6, 3)
        zn = z / np.linalg.norm(z, axis=1, keepdims=True)
        pn = p / np.linalg.norm(p, axis=1, keepdims=True)
        assert loss_scl(z, p, normalize=True).value == pytest.approx(
            loss_scl(zn, pn).value, rel=1e-12
        )

    def test_population_identity(self, legendre_r2):
        # with sqrt(lambda)-scaled true eigenfunctions the objective value is
        # -(1/2) sum lambda_i^2; each batch value is an unbiased estimate
        lam = legendre_r2.eigenvalues
        target = -0.5 * float(np.sum(lam**2))
        values = []
        for k in range(200):
            batch = sample_pairs(legendre_r2, RngState(100 + k), 512)
            z = basis_matrix(legendre_r2, batch.a) * np.sqrt(lam)
            p = basis_matrix(legendre_r2, batch.aplus) * np.sqrt(lam)
            values.append(loss_scl(z, p).value)
        values = np.asarray(values)
        se = values.std(ddof=1) / np.sqrt(len(values))
        assert abs(values.mean() - target) <= 3 * se

    def test_rejects_tiny_batch(self):
        with pytest.raises(ContractViolation):
            loss_scl(np.zeros((1, 2)), np.zeros((1, 2)))


class TestLoraSvdValues:
    def test_all_zero(self):
        assert loss_lora_svd(np.zeros((2, 1)), np.zeros((2, 1))).value == 0.0

    def test_hand_case(self):
        zx = np.array([[1.0], [0.0]])
        za = np.array([[1.0], [1.0]])
        assert loss_lora_svd(zx, za).value == pytest.approx(-0.5, abs=1e-15)

    def test_matches_loop_oracle(self):
        zx, za = random_batch(2, 6, 2)
        assert loss_lora_svd(zx, za).value == pytest.approx(lora_oracle(zx, za), rel=1e-12)

    def test_twice_scl_on_same_batch(self):
        z, p = random_batch(3, 8, 3)
        assert loss_lora_svd(z, p).value == pytest.approx(2.0 * loss_scl(z, p).value, rel=1e-12)


class TestRqValues:
    def test_orthonormal_halves_zero(self):
        split = SplitScheme(seed=0)
        m, d = 4, 2
        h1, h2 = split.halves(m)
        z = np.zeros((m, d))
        # each half's pooled moment is the identity: within each half use
        # sqrt(2)-scaled alternating basis rows (each appears twice via z==p)
        for half in (h1, h2):
            z[half[0]] = [np.sqrt(2.0), 0.0]
            z[half[1]] = [0.0, np.sqrt(2.0)]
        out = loss_rq(z, z.copy(), CFG, split)
        assert out.value == pytest.approx(0.0, abs=1e-12)

    def test_zero_outputs_variance_penalty(self):
        out = loss_rq(np.zeros((4, 1)), np.zeros((4, 1)), CFG, SplitScheme(0))
        assert out.value == pytest.approx(10.0, abs=1e-15)

    def test_matches_loop_oracle(self):
        z, p = random_batch(4, 12, 3)
        split = SplitScheme(seed=1)
        assert loss_rq(z, p, CFG, split).value == pytest.approx(
            rq_oracle(z, p, CFG, split), rel=1e-12
        )

    def test_split_product_estimator_unbiased(self):
        # population E[psi^2] = 1.2, so (E[psi^2] - 1)^2 = 0.04; the
        # split-product estimator is unbiased, the plain square is not
        gen = RngState(5).generator()
        m = 32
        split_vals, naive_vals = [], []
        cfg = PenaltyConfig(mu=1.0, nu=1.0)
        for _ in range(10_000):
            z = np.sqrt(1.2) * gen.standard_normal((m, 1))
            split_vals.append(loss_rq(z, z.copy(), cfg, SplitScheme(0)).value)
            naive_vals.append((np.mean(z**2) - 1.0) ** 2)
        split_vals = np.asarray(split_vals)
        naive_vals = np.asarray(naive_vals)
        se = split_vals.std(ddof=1) / 100.0
        assert abs(split_vals.mean() - 0.04) <= 3 * se
        se_naive = naive_vals.std(ddof=1) / 100.0
        assert naive_vals.mean() - 0.04 > 3 * se_naive

    def test_rejects_odd_batch(self):
        with pytest.raises(ContractViolation):
            loss_rq(np.zeros((5, 1)), np.zeros((5, 1)), CFG, SplitScheme(0))


class TestVicregValues:
    def test_identity_covariance_clamps(self):
        m, d = 4, 2
        cols = np.array(
            [[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]]
        ) * (np.sqrt(3.0) / 2.0)
        cov = (cols - cols.mean(0)).T @ (cols - cols.mean(0)) / (m - 1)
        assert np.allclose(cov, np.eye(d))
        out = loss_vicreg(cols, cols.copy(), CFG)
        # hinge clamps exactly; only covariance roundoff (~1e-33) remains
        assert out.value == pytest.approx(0.0, abs=1e-30)

    def test_constant_outputs_hinge(self):
        z = np.full((6, 1), 0.7)
        out = loss_vicreg(z, z.copy(), PenaltyConfig(mu=10.0, nu=30.0, vicreg_eps=1e-4))
        assert out.value == pytest.approx(10.0 * (1.0 - 0.01), abs=1e-12)

    def test_matches_loop_oracle(self):
        z, p = random_batch(6, 9, 3, scale=0.6)
        assert loss_vicreg(z, p, CFG).value == pytest.approx(
            vicreg_oracle(z, p, CFG), rel=1e-12
        )

    def test_synthetic_hyperparameters_accepted(self):
        cfg = PenaltyConfig(mu=10.0, nu=30.0)
        z, p = random_batch(7, 6, 2)
        assert np.isfinite(loss_vicreg(z, p, cfg).value)


class TestRqDirectValues:
    def test_zero_outputs(self):
        for d in (1, 3):
            out = loss_rq_direct(np.zeros((4, d)), np.zeros((4, d)), CFG, SplitScheme(0))
            assert out.value == pytest.approx(10.0, abs=1e-15)

    def test_matches_loop_oracle(self):
        z, p = random_batch(8, 10, 3)
        split = SplitScheme(seed=2)
        assert loss_rq_direct(z, p, CFG, split).value == pytest.approx(
            rq_direct_oracle(z, p, CFG, split), rel=1e-12
        )

    def test_exact_eigenfunctions_small_penalty(self, legendre_r6):
        # nontrivial orthonormal eigenfunctions: cross penalty is sampling
        # noise, marginal penalty likewise; value ~ -sum of target eigenvalues
        batch = sample_pairs(legendre_r6, RngState(9), 100_000)
        z = basis_matrix(legendre_r6, batch.a)[:, 1:4]
        p = basis_matrix(legendre_r6, batch.aplus)[:, 1:4]
        out = loss_rq_direct(z, p, CFG, SplitScheme(3))
        target = -float(np.sum(legendre_r6.eigenvalues[1:4]))
        assert abs(out.value - target) <= 0.01

    def test_d1_penalty_parts_match_rq(self):
        z, p = random_batch(10, 8, 1)
        split = SplitScheme(seed=4)
        direct = loss_rq_direct(z, p, CFG, split).value
        rq = loss_rq(z, p, CFG, split).value
        inv = float(np.mean(np.sum((z - p) ** 2, axis=1)))
        trace = -float(np.mean(np.sum(z * p, axis=1)))
        # both share the identical variance penalty at d = 1
        assert direct - trace == pytest.approx(rq - inv, rel=1e-12)


# ---------------------------------------------------------------------------
# gradients, exclusions, symmetries
# ---------------------------------------------------------------------------


LOSSES = {
    "scl": lambda z, p, split: loss_scl(z, p),
    "scl_norm": lambda z, p, split: loss_scl(z, p, normalize=True),
    "lora_svd": lambda z, p, split: loss_lora_svd(z, p),
    "rq": lambda z, p, split: loss_rq(z, p, CFG, split),
    "vicreg": lambda z, p, split: loss_vicreg(z, p, CFG),
    "rq_direct": lambda z, p, split: loss_rq_direct(z, p, CFG, split),
}


@pytest.mark.parametrize("name", sorted(LOSSES))
@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(name, seed):
    scale = 0.6 if name == "vicreg" else 1.0  # keep the hinge active and smooth
    z, p = random_batch(20 + seed, 8, 3, scale=scale)
    split = SplitScheme(seed=seed)
    fn = LOSSES[name]
    out = fn(z, p, split)
    num_z = finite_difference(lambda zz: fn(zz, p, split).value, z.copy())
    num_p = finite_difference(lambda pp: fn(z, pp, split).value, p.copy())
    assert max_rel_err(out.grad_z, num_z) <= 1e-6, name
    assert max_rel_err(out.grad_zplus, num_p) <= 1e-6, name


def test_negative_terms_exclude_diagonal():
    z, p = random_batch(30, 5, 2)
    m = 5
    with_diag = np.mean([(z[i] @ p[j]) ** 2 for i in range(m) for j in range(m)])
    without = np.mean([(z[i] @ p[j]) ** 2 for i in range(m) for j in range(m) if i != j])
    pos = -np.mean([z[i] @ p[i] for i in range(m)])
    assert loss_scl(z, p).value == pytest.approx(pos + 0.5 * without, rel=1e-12)
    assert loss_scl(z, p).value != pytest.approx(pos + 0.5 * with_diag, rel=1e-6)


@pytest.mark.parametrize("name", sorted(LOSSES))
def test_permutation_equivariance(name):
    z, p = random_batch(31, 8, 3, scale=0.6 if name == "vicreg" else 1.0)
    base_split = SplitScheme(seed=7)
    h1, h2 = base_split.halves(8)
    perm = RngState(32).generator().permutation(8)
    inv = np.argsort(perm)
    moved_split = _FixedSplit(inv[h1], inv[h2])  # rows follow the permutation
    # note: for fixed-split losses the halves move with the rows
    v0 = LOSSES[name](z, p, _FixedSplit(h1, h2)).value
    v1 = LOSSES[name](z[perm], p[perm], moved_split).value
    assert v1 == pytest.approx(v0, rel=1e-12, abs=1e-14)


@pytest.mark.parametrize("name", ["scl", "lora_svd"])
def test_orthogonal_rotation_invariance(name):
    z, p = random_batch(33, 8, 3)
    q = np.linalg.qr(RngState(34).generator().standard_normal((3, 3)))[0]
    fn = LOSSES[name]
    assert fn(z @ q, p @ q, None).value == pytest.approx(fn(z, p, None).value, rel=1e-12)


def test_split_scheme_properties():
    h1, h2 = SplitScheme(seed=0).halves(10)
    assert sorted(np.concatenate([h1, h2]).tolist()) == list(range(10))
    assert len(h1) == len(h2) == 5
    again = SplitScheme(seed=0).halves(10)
    assert np.array_equal(h1, again[0]) and np.array_equal(h2, again[1])
    with pytest.raises(ContractViolation):
        SplitScheme(seed=0).halves(7)
