//! Reference checks shared by the test suites and the acceptance run:
//! exhaustive matching, a scalar alignment-loss evaluation, and the
//! masking, permutation and gating properties of the fused model.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::tg_qe;
use crate::error::{Error, Result};
use crate::fusion::{gated_injection, tg_fe, FusionParams, TextState};
use crate::loss::{alignment_loss, LossWeights};
use crate::matching::{hungarian_match, Assignment};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::text::{embed_class_names, ClassEmbeddingBank, ClassVocabulary};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Minimum over every injective row→column (or column→row) map, summed in
/// row order.
pub fn brute_force_min(cost: &Tensor) -> f64 {
    let (n, k) = cost.dims2().expect("matrix");
    let (rows, cols, at): (usize, usize, &dyn Fn(usize, usize) -> f64) = if n <= k {
        (n, k, &|i, j| cost.at(i, j))
    } else {
        (k, n, &|i, j| cost.at(j, i))
    };
    fn go(
        row: usize,
        rows: usize,
        cols: usize,
        used: &mut [bool],
        picked: &mut Vec<(usize, usize)>,
        at: &dyn Fn(usize, usize) -> f64,
        transposed: bool,
        best: &mut f64,
    ) {
        if row == rows {
            let mut pairs = picked.clone();
            if transposed {
                for p in &mut pairs {
                    *p = (p.1, p.0);
                }
                pairs.sort_unstable();
            }
            let total: f64 = pairs
                .iter()
                .map(|&(i, j)| if transposed { at(j, i) } else { at(i, j) })
                .sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                picked.push((row, c));
                go(row + 1, rows, cols, used, picked, at, transposed, best);
                picked.pop();
                used[c] = false;
            }
        }
    }
    if rows == 0 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    go(0, rows, cols, &mut vec![false; cols], &mut Vec::new(), at, n > k, &mut best);
    best
}

/// Count of matrices where the assignment cost differs from the exhaustive
/// minimum (exact comparison), plus how many were tried.
pub fn matcher_mismatches(count: usize, max_dim: usize, seed: u64) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..count {
        let n = rng.gen_range(1..=max_dim);
        let k = rng.gen_range(1..=max_dim);
        let cost = random(&mut rng, &[n, k], -5.0, 5.0);
        let a = hungarian_match(&cost)?;
        if a.len() != n.min(k) || a.total_cost(&cost) != brute_force_min(&cost) {
            bad += 1;
        }
    }
    Ok((bad, count))
}

/// The varifocal entry written out directly.
pub fn scalar_alignment_term(theta: f64, u: f64, alpha: f64, gamma: f64) -> f64 {
    if u > 0.0 {
        -u * (u * libm::log(theta) + (1.0 - u) * libm::log(1.0 - theta))
    } else {
        -alpha * libm::pow(theta, gamma) * libm::log(1.0 - theta)
    }
}

/// Largest absolute gap between `alignment_loss` and the scalar form over
/// `count` random score/target grids.
pub fn alignment_loss_gap(count: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = rng.gen_range(1..=6);
        let slots = rng.gen_range(1..=6);
        let g = rng.gen_range(0..=n.min(slots));
        let mut queries: Vec<usize> = (0..n).collect();
        queries.shuffle(&mut rng);
        let mut targets: Vec<usize> = (0..slots).collect();
        targets.shuffle(&mut rng);
        let mut pairs: Vec<(usize, usize)> = (0..g).map(|i| (queries[i], i)).collect();
        pairs.sort_unstable();
        let gt_slot: Vec<usize> = targets[..g].to_vec();
        let ious: Vec<f64> = (0..g).map(|_| rng.gen_range(0.01..1.0)).collect();
        let mut valid: Vec<bool> = (0..slots).map(|_| rng.gen_bool(0.8)).collect();
        for &s in &gt_slot {
            valid[s] = true;
        }
        let scores = random(&mut rng, &[n, slots], -6.0, 6.0);
        let normalizer = rng.gen_range(1.0..4.0);
        let assignment = Assignment { pairs: pairs.clone() };

        let mut tape = Tape::detached();
        let s = tape.constant(scores.clone());
        let l = alignment_loss(&mut tape, s, &valid, &assignment, &gt_slot, &ious, &w, normalizer)?;
        let got = tape.value(l).data()[0];

        let mut u = vec![0.0; n * slots];
        for (&(q, t), &v) in pairs.iter().zip(&ious) {
            u[q * slots + gt_slot[t]] = v;
        }
        let mut want = 0.0;
        for i in 0..n {
            for j in 0..slots {
                if valid[j] {
                    let theta = 1.0 / (1.0 + libm::exp(-scores.at(i, j)));
                    want += scalar_alignment_term(theta, u[i * slots + j], w.vfl_alpha, w.vfl_gamma);
                }
            }
        }
        worst = worst.max((got - want / normalizer).abs());
    }
    Ok(worst)
}

/// Small model used by the property checks.
pub fn probe_config() -> ModelConfig {
    ModelConfig {
        channels: 16,
        text_dim: 16,
        attn_dim: 8,
        hidden: 24,
        decoder_layers: 2,
        queries: 8,
        pos_freqs: 2,
        ..ModelConfig::default()
    }
}

fn probe_vocab(rng: &mut ChaCha8Rng) -> ClassVocabulary {
    const WORDS: [&str; 6] = ["red", "green", "blue", "amber", "violet", "teal"];
    const SHAPES: [&str; 4] = ["circle", "square", "ring", "cross"];
    let n = rng.gen_range(2..=6);
    let mut names = BTreeSet::new();
    while names.len() < n {
        names.insert(format!("{} {}", WORDS.choose(rng).unwrap(), SHAPES.choose(rng).unwrap()));
    }
    let names: Vec<_> = names.into_iter().collect();
    ClassVocabulary::open(&names).expect("distinct names")
}

/// Every observable of one forward pass that the properties compare.
struct Probe {
    /// Per stage `[N, valid slots]` scores, columns in slot order.
    scores: Vec<Tensor>,
    boxes: Vec<Tensor>,
    gates: Vec<Tensor>,
    tokens: BTreeSet<usize>,
}

fn probe(model: &Model, image: &Tensor, bank: &ClassEmbeddingBank) -> Result<Probe> {
    let mut tape = Tape::new(&model.params);
    let out = model.forward(&mut tape, image, bank)?;
    let valid: Vec<usize> = (0..bank.n_slots()).filter(|&j| bank.valid_mask()[j]).collect();
    let mut scores = Vec::new();
    let mut boxes = Vec::new();
    let mut gates: Vec<Tensor> = out
        .enhanced
        .gate_maps
        .iter()
        .flatten()
        .map(|g| tape.value(*g).clone())
        .collect();
    for st in &out.stages {
        let s = tape.value(st.scores);
        let n = s.rows();
        let data = (0..n).flat_map(|i| valid.iter().map(move |&j| s.at(i, j))).collect();
        scores.push(Tensor::new(&[n, valid.len()], data)?);
        boxes.push(tape.value(st.boxes).clone());
        if let Some(g) = st.gate {
            gates.push(tape.value(g).clone());
        }
    }
    Ok(Probe {
        scores,
        boxes,
        gates,
        tokens: out.queries.token_index.iter().copied().collect(),
    })
}

fn max_gap(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("{} vs {} tensors", a.len(), b.len())));
    }
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::Contract("shape changed".into()));
        }
        for (p, q) in x.data().iter().zip(y.data()) {
            worst = worst.max((p - q).abs());
        }
    }
    Ok(worst)
}

/// Worst ∞-norm change of valid-slot scores, gates and boxes when 1–8
/// padding slots are appended, over `passes` seeded models and images.
pub fn masking_gap(passes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = probe_config();
    let mut worst: f64 = 0.0;
    for p in 0..passes {
        let model = Model::new(cfg, seed ^ p as u64)?;
        let image = random(&mut rng, &[3, 32, 32], 0.0, 1.0);
        let bank = embed_class_names(&probe_vocab(&mut rng), cfg.text_dim)?;
        let padded = bank.with_padding(rng.gen_range(1..=8));
        let a = probe(&model, &image, &bank)?;
        let b = probe(&model, &image, &padded)?;
        worst = worst
            .max(max_gap(&a.scores, &b.scores)?)
            .max(max_gap(&a.gates, &b.gates)?)
            .max(max_gap(&a.boxes, &b.boxes)?);
    }
    Ok(worst)
}

/// Outcome of the slot-permutation check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PermutationReport {
    /// Worst gap between permuted scores and permuted columns of the original.
    pub score_gap: f64,
    pub box_gap: f64,
    /// Passes where the selected token set changed.
    pub token_set_changes: usize,
}

pub fn permutation_report(passes: usize, seed: u64) -> Result<PermutationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = probe_config();
    let mut rep = PermutationReport {
        score_gap: 0.0,
        box_gap: 0.0,
        token_set_changes: 0,
    };
    for p in 0..passes {
        let model = Model::new(cfg, seed ^ p as u64)?;
        let image = random(&mut rng, &[3, 32, 32], 0.0, 1.0);
        let bank = embed_class_names(&probe_vocab(&mut rng), cfg.text_dim)?;
        let mut order: Vec<usize> = (0..bank.n_slots()).collect();
        order.shuffle(&mut rng);
        let permuted = bank.take_slots(&order)?;
        let a = probe(&model, &image, &bank)?;
        let b = probe(&model, &image, &permuted)?;
        let moved: Vec<Tensor> = a
            .scores
            .iter()
            .map(|s| {
                let n = s.rows();
                let data = (0..n).flat_map(|i| order.iter().map(move |&j| s.at(i, j))).collect();
                Tensor::new(&[n, order.len()], data)
            })
            .collect::<Result<_>>()?;
        rep.score_gap = rep.score_gap.max(max_gap(&moved, &b.scores)?);
        rep.box_gap = rep.box_gap.max(max_gap(&a.boxes, &b.boxes)?);
        if a.tokens != b.tokens {
            rep.token_set_changes += 1;
        }
    }
    Ok(rep)
}

/// Outcome of the gate-limit check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateReport {
    /// `‖F′ − F‖∞` with every logit at −1e4, gate applied.
    pub feature_gap: f64,
    /// `‖Q′ − Q‖∞` likewise, on query-shaped inputs.
    pub query_gap: f64,
    /// The same feature case with the gate multiply skipped.
    pub ungated_gap: f64,
    /// Zero value projections leave enhancement and query enhancement
    /// bitwise unchanged.
    pub zero_value_identity: bool,
}

pub fn gate_report(seed: u64) -> Result<GateReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n, c) = (40, 12, 5, 16);
    let valid = vec![true; n];
    let forced = |rng: &mut ChaCha8Rng, rows: usize, apply: bool| -> Result<f64> {
        let mut tape = Tape::detached();
        let base = random(rng, &[rows, c], -3.0, 3.0);
        let b = tape.constant(base.clone());
        let logits = tape.constant(Tensor::full(&[rows, n], -1e4));
        let values = tape.constant(random(rng, &[n, c], -3.0, 3.0));
        let (out, _) = gated_injection(&mut tape, b, logits, values, &valid, apply)?;
        Ok(max_gap(&[tape.value(out).clone()], &[base])?)
    };
    let feature_gap = forced(&mut rng, m, true)?;
    let query_gap = forced(&mut rng, k, true)?;
    let ungated_gap = forced(&mut rng, m, false)?;

    let d = 12;
    let mut store = ParamStore::new();
    let params = FusionParams::init_text_guided(&mut store, "probe", c, d, 8, &mut rng)?;
    *store.get_mut(params.value) = Tensor::zeros(&[d, c]);
    let mut identical = true;
    for rows in [m, k] {
        let x = random(&mut rng, &[rows, c], -3.0, 3.0);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let text = TextState {
            embeddings: tape.constant(random(&mut rng, &[n, d], -1.0, 1.0)),
            valid: valid.clone(),
        };
        let f = tg_fe(&mut tape, xv, &text, &params, true)?.0;
        let q = tg_qe(&mut tape, xv, &text, &params, true)?.0;
        for out in [f, q] {
            identical &= tape
                .value(out)
                .data()
                .iter()
                .zip(x.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    Ok(GateReport {
        feature_gap,
        query_gap,
        ungated_gap,
        zero_value_identity: identical,
    })
}
