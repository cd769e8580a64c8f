//! Transducer negative log-likelihood by forward-backward dynamic programming
//! over the (T, U) lattice, with analytic gradients and an exhaustive
//! alignment-enumeration oracle for small instances.
//!
//! Lattice node (t, u) holds the output distribution after seeing input
//! frames up to t and emitting u target tokens. From (t, u) a blank moves to
//! (t+1, u) and an emission of `target[u]` moves to (t, u+1); the sequence
//! probability marginalizes every monotone path ending in the final blank at
//! (T-1, U). Log-space throughout; "impossible" is a large negative sentinel
//! with absorbing adds.

use crate::error::{Error, Result};

pub const LOG_ZERO: f64 = -1e30;

fn logsumexp2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo <= LOG_ZERO * 0.5 {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// Alpha/beta arrays over the T×(U+1) lattice plus the per-node blank/emit
/// log-probs they were built from.
#[derive(Debug, Clone)]
pub struct LossLattice {
    pub t_len: usize,
    pub u_len: usize,
    /// Log-prob of reaching node (t, u); row-major T×(U+1).
    pub alpha: Vec<f64>,
    /// Log-prob of completing the target from node (t, u).
    pub beta: Vec<f64>,
    pub blank: Vec<f64>,
    pub emit: Vec<f64>,
    /// Total log-likelihood (from the alpha side).
    pub total: f64,
}

impl LossLattice {
    fn idx(&self, t: usize, u: usize) -> usize {
        t * (self.u_len + 1) + u
    }

    pub fn alpha_at(&self, t: usize, u: usize) -> f64 {
        self.alpha[self.idx(t, u)]
    }

    pub fn beta_at(&self, t: usize, u: usize) -> f64 {
        self.beta[self.idx(t, u)]
    }

    /// Total log-likelihood computed from the beta side; equals `total`
    /// within roundoff.
    pub fn total_from_beta(&self) -> f64 {
        self.beta[0]
    }
}

fn validate(
    logp: &[f64],
    t_len: usize,
    u_len: usize,
    vocab_plus: usize,
    target: &[usize],
) -> Result<()> {
    if t_len == 0 {
        return Err(Error::Contract("transducer loss needs T >= 1".into()));
    }
    if vocab_plus < 2 {
        return Err(Error::Contract("vocabulary must hold blank plus one token".into()));
    }
    if logp.len() != t_len * (u_len + 1) * vocab_plus {
        return Err(Error::Shape(format!(
            "log-prob buffer has {} entries, want T({t_len})*(U+1)({})*(V+1)({vocab_plus})",
            logp.len(),
            u_len + 1
        )));
    }
    if let Some(&bad) = target.iter().find(|&&k| k == 0 || k >= vocab_plus) {
        return Err(Error::Contract(format!(
            "target token {bad} outside vocabulary 1..={}",
            vocab_plus - 1
        )));
    }
    Ok(())
}

/// Build the full forward-backward lattice.
pub fn lattice(
    logp: &[f64],
    t_len: usize,
    u_len: usize,
    vocab_plus: usize,
    target: &[usize],
) -> Result<LossLattice> {
    validate(logp, t_len, u_len, vocab_plus, target)?;
    let stride = u_len + 1;
    let at = |t: usize, u: usize, k: usize| logp[(t * stride + u) * vocab_plus + k];

    let mut blank = vec![LOG_ZERO; t_len * stride];
    let mut emit = vec![LOG_ZERO; t_len * stride];
    for t in 0..t_len {
        for u in 0..=u_len {
            blank[t * stride + u] = at(t, u, 0);
            if u < u_len {
                emit[t * stride + u] = at(t, u, target[u]);
            }
        }
    }

    let mut alpha = vec![LOG_ZERO; t_len * stride];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..=u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha[(t - 1) * stride + u] + blank[(t - 1) * stride + u]
            } else {
                LOG_ZERO
            };
            let from_emit = if u > 0 {
                alpha[t * stride + u - 1] + emit[t * stride + u - 1]
            } else {
                LOG_ZERO
            };
            let a = logsumexp2(from_blank, from_emit);
            debug_assert!(a <= 1e-9, "alpha({t},{u}) = {a} above log 1");
            alpha[t * stride + u] = a;
        }
    }
    let total = alpha[(t_len - 1) * stride + u_len] + blank[(t_len - 1) * stride + u_len];

    let mut beta = vec![LOG_ZERO; t_len * stride];
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            let b = if t == t_len - 1 && u == u_len {
                blank[t * stride + u]
            } else {
                let via_blank = if t + 1 < t_len {
                    blank[t * stride + u] + beta[(t + 1) * stride + u]
                } else {
                    LOG_ZERO
                };
                let via_emit = if u < u_len {
                    emit[t * stride + u] + beta[t * stride + u + 1]
                } else {
                    LOG_ZERO
                };
                logsumexp2(via_blank, via_emit)
            };
            beta[t * stride + u] = b;
        }
    }

    Ok(LossLattice {
        t_len,
        u_len,
        alpha,
        beta,
        blank,
        emit,
        total,
    })
}

/// Negative log-likelihood of `target` under the lattice of log-probs.
pub fn nll(
    logp: &[f64],
    t_len: usize,
    u_len: usize,
    vocab_plus: usize,
    target: &[usize],
) -> Result<f64> {
    Ok(-lattice(logp, t_len, u_len, vocab_plus, target)?.total)
}

/// NLL plus its gradient w.r.t. every log-prob entry.
///
/// d NLL / d logp[t,u,k] = -exp(alpha(t,u) + logp[t,u,k] + beta(successor) - total),
/// zero for tokens that sit on no alignment path.
pub fn nll_with_grad(
    logp: &[f64],
    t_len: usize,
    u_len: usize,
    vocab_plus: usize,
    target: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let lat = lattice(logp, t_len, u_len, vocab_plus, target)?;
    let stride = u_len + 1;
    let mut grad = vec![0.0; logp.len()];
    for t in 0..t_len {
        for u in 0..=u_len {
            let a = lat.alpha[t * stride + u];
            if a <= LOG_ZERO * 0.5 {
                continue;
            }
            // Blank: leaves the lattice when t = T-1, which is a valid exit
            // only from u = U (the final blank).
            let beta_after_blank = if t + 1 < t_len {
                lat.beta[(t + 1) * stride + u]
            } else if u == u_len {
                0.0
            } else {
                LOG_ZERO
            };
            let occ_blank = a + lat.blank[t * stride + u] + beta_after_blank - lat.total;
            if occ_blank > LOG_ZERO * 0.5 {
                grad[(t * stride + u) * vocab_plus] = -occ_blank.exp();
            }
            if u < u_len {
                let occ_emit =
                    a + lat.emit[t * stride + u] + lat.beta[t * stride + u + 1] - lat.total;
                if occ_emit > LOG_ZERO * 0.5 {
                    grad[(t * stride + u) * vocab_plus + target[u]] = -occ_emit.exp();
                }
            }
        }
    }
    Ok((-lat.total, grad))
}

/// Exhaustive oracle: enumerate every monotone alignment, sum the path
/// probabilities in linear space, return -log. Refuses instances with more
/// than 10^6 paths.
pub fn brute_force_nll(
    logp: &[f64],
    t_len: usize,
    u_len: usize,
    vocab_plus: usize,
    target: &[usize],
) -> Result<f64> {
    validate(logp, t_len, u_len, vocab_plus, target)?;
    let paths = binomial(t_len - 1 + u_len, u_len);
    if paths > 1_000_000 {
        return Err(Error::Contract(format!(
            "brute force refused: {paths} alignments"
        )));
    }
    let stride = u_len + 1;
    let at = |t: usize, u: usize, k: usize| logp[(t * stride + u) * vocab_plus + k];

    fn walk(
        t: usize,
        u: usize,
        acc: f64,
        t_len: usize,
        u_len: usize,
        target: &[usize],
        at: &dyn Fn(usize, usize, usize) -> f64,
        total: &mut f64,
    ) {
        if t == t_len - 1 && u == u_len {
            *total += (acc + at(t, u, 0)).exp();
            return;
        }
        if t + 1 < t_len {
            walk(t + 1, u, acc + at(t, u, 0), t_len, u_len, target, at, total);
        }
        if u < u_len {
            walk(t, u + 1, acc + at(t, u, target[u]), t_len, u_len, target, at, total);
        }
    }

    let mut total = 0.0;
    walk(0, 0, 0.0, t_len, u_len, target, &at, &mut total);
    Ok(-total.ln())
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut out: u128 = 1;
    for i in 0..k {
        out = out * (n - i) as u128 / (i + 1) as u128;
        if out > 10_000_000 {
            return out;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Random valid log-distribution lattice for T, U, V.
    fn random_instance(
        rng: &mut ChaCha8Rng,
        t_len: usize,
        u_len: usize,
        vocab: usize,
    ) -> (Vec<f64>, Vec<usize>) {
        let vp = vocab + 1;
        let rows = t_len * (u_len + 1);
        let mut logp = vec![0.0; rows * vp];
        for r in 0..rows {
            let logits: Vec<f64> = (0..vp).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let row = crate::tensor::log_softmax_rows(&logits, 1, vp);
            logp[r * vp..(r + 1) * vp].copy_from_slice(&row);
        }
        let target: Vec<usize> = (0..u_len).map(|_| rng.gen_range(1..=vocab)).collect();
        (logp, target)
    }

    #[test]
    fn single_frame_empty_target_is_one_blank() {
        // T=1, U=0: the only path is the final blank at (0,0).
        let logp = crate::tensor::log_softmax_rows(&[0.3, -0.7, 1.1], 1, 3);
        let loss = nll(&logp, 1, 0, 3, &[]).unwrap();
        assert!((loss + logp[0]).abs() < 1e-12);
        let brute = brute_force_nll(&logp, 1, 0, 3, &[]).unwrap();
        assert!((loss - brute).abs() < 1e-12);
    }

    #[test]
    fn two_frame_one_token_uniform_matches_hand_enumeration() {
        // Uniform over 3 symbols at every node: two alignments, each (1/3)^3.
        let u = (1.0f64 / 3.0).ln();
        let logp = vec![u; 2 * 2 * 3];
        let loss = nll(&logp, 2, 1, 3, &[1]).unwrap();
        let expect = -(2.0f64 / 27.0).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        let brute = brute_force_nll(&logp, 2, 1, 3, &[1]).unwrap();
        assert!((loss - brute).abs() < 1e-12);
    }

    #[test]
    fn certain_blank_path_has_near_zero_loss() {
        // All mass on blank everywhere, U=0.
        let t_len = 5;
        let mut logp = vec![-40.0; t_len * 1 * 3];
        for t in 0..t_len {
            logp[t * 3] = 0.0; // log prob ~1 for blank
        }
        let loss = nll(&logp, t_len, 0, 3, &[]).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..200 {
            let t_len = rng.gen_range(1..=4);
            let u_len = rng.gen_range(0..=3);
            let vocab = rng.gen_range(1..=3);
            let (logp, target) = random_instance(&mut rng, t_len, u_len, vocab);
            let fast = nll(&logp, t_len, u_len, vocab + 1, &target).unwrap();
            let brute = brute_force_nll(&logp, t_len, u_len, vocab + 1, &target).unwrap();
            assert!(
                (fast - brute).abs() < 1e-9,
                "T={t_len} U={u_len} V={vocab}: {fast} vs {brute}"
            );
        }
    }

    #[test]
    fn alpha_and_beta_totals_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (logp, target) = random_instance(&mut rng, 4, 3, 3);
            let lat = lattice(&logp, 4, 3, 4, &target).unwrap();
            assert!((lat.total - lat.total_from_beta()).abs() < 1e-9);
        }
    }

    #[test]
    fn every_anti_diagonal_carries_full_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let (logp, target) = random_instance(&mut rng, 4, 2, 3);
            let lat = lattice(&logp, 4, 2, 4, &target).unwrap();
            for d in 0..(4 - 1 + 2) {
                let mut mass = f64::NEG_INFINITY;
                for t in 0..4usize {
                    if d >= t && d - t <= 2 {
                        let u = d - t;
                        mass = logsumexp2(mass.max(LOG_ZERO), lat.alpha_at(t, u) + lat.beta_at(t, u) - lat.total);
                    }
                }
                assert!(mass.abs() < 1e-8, "diagonal {d} mass {mass}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (logp, target) = random_instance(&mut rng, 3, 2, 2);
        let (_, grad) = nll_with_grad(&logp, 3, 2, 3, &target).unwrap();
        let h = 1e-6;
        for i in 0..logp.len() {
            let mut up = logp.clone();
            up[i] += h;
            let mut down = logp.clone();
            down[i] -= h;
            let numeric = (nll(&up, 3, 2, 3, &target).unwrap()
                - nll(&down, 3, 2, 3, &target).unwrap())
                / (2.0 * h);
            let err = crate::graph::rel_err(grad[i], numeric);
            assert!(err < 1e-6, "entry {i}: analytic {} numeric {numeric}", grad[i]);
        }
    }

    #[test]
    fn off_path_tokens_have_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let (logp, target) = random_instance(&mut rng, 3, 2, 3);
        let (_, grad) = nll_with_grad(&logp, 3, 2, 4, &target).unwrap();
        let stride = 3;
        for t in 0..3 {
            for u in 0..=2usize {
                for k in 1..4 {
                    let on_path = u < 2 && k == target[u];
                    if !on_path {
                        assert_eq!(grad[(t * stride + u) * 4 + k], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn occupancy_rows_sum_to_one_per_anti_diagonal() {
        // The gradient entries are negated occupancies; transitions leaving
        // each anti-diagonal must carry the whole path mass.
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let (logp, target) = random_instance(&mut rng, 4, 3, 2);
        let (_, grad) = nll_with_grad(&logp, 4, 3, 3, &target).unwrap();
        let stride = 4;
        for d in 0..(4 + 3) {
            let mut mass = 0.0;
            for t in 0..4usize {
                if d >= t && d - t <= 3 {
                    let u = d - t;
                    for k in 0..3 {
                        mass -= grad[(t * stride + u) * 3 + k];
                    }
                }
            }
            assert!((mass - 1.0).abs() < 1e-9, "diagonal {d} mass {mass}");
        }
    }

    #[test]
    fn padding_with_certain_blank_frames_preserves_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let (logp, target) = random_instance(&mut rng, 3, 2, 2);
        let base = nll(&logp, 3, 2, 3, &target).unwrap();
        // Two extra frames whose blank prob is 1.
        let mut padded = logp.clone();
        for _ in 0..2 {
            for _u in 0..=2usize {
                padded.extend_from_slice(&[0.0, LOG_ZERO, LOG_ZERO]);
            }
        }
        let loss = nll(&padded, 5, 2, 3, &target).unwrap();
        assert!((loss - base).abs() < 1e-9, "{loss} vs {base}");
    }

    #[test]
    fn vocabulary_relabeling_leaves_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let (logp, target) = random_instance(&mut rng, 3, 2, 3);
        let base = nll(&logp, 3, 2, 4, &target).unwrap();
        // Swap token ids 1 and 3 everywhere.
        let perm = [0usize, 3, 2, 1];
        let mut relabeled = vec![0.0; logp.len()];
        for r in 0..(3 * 3) {
            for k in 0..4 {
                relabeled[r * 4 + perm[k]] = logp[r * 4 + k];
            }
        }
        let target2: Vec<usize> = target.iter().map(|&k| perm[k]).collect();
        let swapped = nll(&relabeled, 3, 2, 4, &target2).unwrap();
        assert!((base - swapped).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_vocab_target() {
        let logp = vec![(1.0f64 / 3.0).ln(); 2 * 2 * 3];
        assert!(nll(&logp, 2, 1, 3, &[5]).is_err());
        assert!(nll(&logp, 2, 1, 3, &[0]).is_err());
    }

    #[test]
    fn brute_force_refuses_huge_instances() {
        let logp = vec![0.0; 40 * 31 * 2];
        assert!(brute_force_nll(&logp, 40, 30, 2, &vec![1; 30]).is_err());
    }
}
