//! Self-verification: the oracle checks behind `verify`, runnable from a
//! fresh build with no data on disk. Each check pits an implementation
//! against an independent route: finite differences for gradients,
//! exhaustive alignment enumeration for the lattice loss, offline encoding
//! for the incremental encoder, boolean mask composition for receptive
//! fields.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::graph::grad_check;
use crate::mask::{build_chunk_mask, compose_mask_hops, receptive_field, ChunkMaskSpec};
use crate::model::{BoundModel, FeatureSequence, ModelConfig, StreamState, TransducerModel};
use crate::tensor::Tensor;
use crate::transducer;

/// Deliberate defects for exercising the failure path of `verify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyFault {
    None,
    /// Shift the queried receptive-field left edge by one frame.
    MaskOffByOne,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn verify_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 5,
        hidden_dim: 12,
        num_layers: 2,
        num_heads: 2,
        ff_dim: 16,
        predictor_layers: 1,
        predictor_dim: 8,
        joint_dim: 8,
        chunk: ChunkMaskSpec {
            chunk_size: 2,
            left_chunks: 1,
            num_layers: 2,
        },
        layer_norm_eps: 1e-5,
    }
}

fn check_kernel_gradients() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let gain = Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
    let bias = Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
    let result = grad_check(
        &[x, w, gain, bias],
        |g, ids| {
            let ln = g.layer_norm(ids[0], ids[2], ids[3], 1e-5)?;
            let mm = g.matmul(ln, ids[1])?;
            let lp = g.log_softmax(mm)?;
            let act = g.tanh(lp)?;
            let sq = g.mul(act, act)?;
            g.sum(sq)
        },
        1e-5,
    );
    match result {
        Ok(err) => CheckResult {
            name: "kernel-gradients",
            passed: err < 1e-5,
            detail: format!("max rel err {err:.3e} (tolerance 1e-5)"),
        },
        Err(e) => CheckResult {
            name: "kernel-gradients",
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn check_model_gradients() -> CheckResult {
    let mut model = TransducerModel::new(verify_config(), 11).unwrap();
    let branch = model.add_branch("M", 3, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let feats = FeatureSequence::new(
        Tensor::new(vec![4, 5], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
    )
    .unwrap();
    let target = vec![1usize, 3];
    let tensors: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let spec = model.config.chunk;
    let result = grad_check(
        &tensors,
        move |g, ids| {
            let bound = BoundModel {
                ids: ids.iter().map(|&id| Some(id)).collect(),
            };
            model.utterance_nll_graph(g, &bound, &feats, &spec, branch, &target)
        },
        1e-5,
    );
    match result {
        Ok(err) => CheckResult {
            name: "model-gradients",
            passed: err < 1e-4,
            detail: format!("max rel err {err:.3e} (tolerance 1e-4)"),
        },
        Err(e) => CheckResult {
            name: "model-gradients",
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn check_lattice_oracle() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t_len = rng.gen_range(1..=4);
        let u_len = rng.gen_range(0..=3);
        let vocab = rng.gen_range(1..=3);
        let vp = vocab + 1;
        let rows = t_len * (u_len + 1);
        let mut logp = vec![0.0; rows * vp];
        for r in 0..rows {
            let logits: Vec<f64> = (0..vp).map(|_| rng.gen_range(-2.0..2.0)).collect();
            logp[r * vp..(r + 1) * vp]
                .copy_from_slice(&crate::tensor::log_softmax_rows(&logits, 1, vp));
        }
        let target: Vec<usize> = (0..u_len).map(|_| rng.gen_range(1..=vocab)).collect();
        let fast = transducer::nll(&logp, t_len, u_len, vp, &target).unwrap();
        let brute = transducer::brute_force_nll(&logp, t_len, u_len, vp, &target).unwrap();
        worst = worst.max((fast - brute).abs());
    }
    CheckResult {
        name: "lattice-brute-force",
        passed: worst < 1e-9,
        detail: format!("worst |dp - enumeration| = {worst:.3e} over 100 instances"),
    }
}

fn check_streaming_equivalence() -> CheckResult {
    let model = TransducerModel::new(verify_config(), 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut worst = 0.0f64;
    for &(t, u, l) in &[(7usize, 2usize, 1usize), (9, 3, 0), (8, 4, 2)] {
        let feats = FeatureSequence::new(
            Tensor::new(vec![t, 5], (0..t * 5).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
        )
        .unwrap();
        let spec = ChunkMaskSpec::new(u, l, model.config.num_layers).unwrap();
        let offline = model.encode(&feats, &spec).unwrap();
        let mut state = StreamState::new();
        let mut rows = Vec::new();
        let mut start = 0;
        while start < t {
            let end = (start + u).min(t);
            let out = model
                .encode_incremental(&mut state, &feats.slice(start, end).unwrap(), &spec)
                .unwrap();
            rows.extend_from_slice(&out.values);
            start = end;
        }
        for (a, b) in offline.values.iter().zip(&rows) {
            worst = worst.max((a - b).abs());
        }
    }
    CheckResult {
        name: "streaming-equivalence",
        passed: worst < 1e-10,
        detail: format!("max |incremental - offline| = {worst:.3e}"),
    }
}

fn check_receptive_fields(fault: VerifyFault) -> CheckResult {
    let mut failures = 0usize;
    let mut checked = 0usize;
    for &t in &[6usize, 12, 13] {
        for &u in &[2usize, 3] {
            for &l in &[0usize, 1, 2] {
                let spec = ChunkMaskSpec::new(u, l, 3).unwrap();
                let mask = build_chunk_mask(t, &spec);
                for layer in 1..=3usize {
                    let reach = compose_mask_hops(&mask, layer);
                    for q in 1..=t {
                        let (mut left, right) = receptive_field(q, layer, t, &spec);
                        if fault == VerifyFault::MaskOffByOne {
                            left = (left + 1).min(t);
                        }
                        for k in 1..=t {
                            checked += 1;
                            let expect = k >= left && k <= right;
                            if reach.allowed(q - 1, k - 1) != expect {
                                failures += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    CheckResult {
        name: "mask-receptive-field",
        passed: failures == 0,
        detail: format!("{failures} mismatches over {checked} query/key pairs"),
    }
}

/// Run every check; any fault other than `None` is injected into the matching
/// check to demonstrate that failures are caught.
pub fn run_all(fault: VerifyFault) -> Vec<CheckResult> {
    vec![
        check_kernel_gradients(),
        check_model_gradients(),
        check_lattice_oracle(),
        check_streaming_equivalence(),
        check_receptive_fields(fault),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_all_checks() {
        let results = run_all(VerifyFault::None);
        assert_eq!(results.len(), 5);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn injected_mask_fault_is_caught() {
        let results = run_all(VerifyFault::MaskOffByOne);
        let mask_check = results
            .iter()
            .find(|r| r.name == "mask-receptive-field")
            .unwrap();
        assert!(!mask_check.passed, "off-by-one fault went unnoticed");
        for r in results.iter().filter(|r| r.name != "mask-receptive-field") {
            assert!(r.passed, "{} should be unaffected by the mask fault", r.name);
        }
    }
}
