//! Test-only reference decoder and invariant checks.
//!
//! The reference is written directly from the math with explicit loops over
//! (layer, head, position) and does not call any library routine.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};

use have_core::StepSnapshot;

pub const ETA: f64 = 1e-4;
pub const GATE_EPS: f64 = 1e-8;
pub const CAL_EPS: f64 = 1e-12;
pub const FALLBACK_TAU: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct RefConfig {
    pub alpha: f64,
    pub top_rank: usize,
    pub special: BTreeSet<u32>,
    pub no_hag: bool,
    pub no_vc: bool,
}

#[derive(Debug, Clone)]
pub struct RefOutput {
    pub probs: Vec<f64>,
    pub support: BTreeSet<u32>,
    pub weights: Vec<f64>,
    pub u_ctx: Vec<f64>,
    pub evidence: BTreeMap<u32, f64>,
    pub entropy: f64,
    pub scores: Vec<f64>,
    pub chosen: u32,
    pub fallback: bool,
}

pub fn reference_decode(s: &StepSnapshot, cfg: &RefConfig) -> RefOutput {
    let n_layers = s.dims.layers;
    let n_heads = s.dims.heads;
    let group = n_heads / s.dims.kv_heads;
    let vocab = s.logits.len();
    let ctx = s.context.len();

    // model distribution
    let mut zmax = f64::NEG_INFINITY;
    for v in 0..vocab {
        if (s.logits[v] as f64) > zmax {
            zmax = s.logits[v] as f64;
        }
    }
    let mut probs = vec![0.0; vocab];
    let mut zsum = 0.0;
    for v in 0..vocab {
        probs[v] = (s.logits[v] as f64 - zmax).exp();
        zsum += probs[v];
    }
    for v in 0..vocab {
        probs[v] /= zsum;
    }

    // support: repeatedly take the best remaining id, lowest id on ties
    let mut support = BTreeSet::new();
    for _ in 0..cfg.top_rank.min(vocab) {
        let mut best: Option<usize> = None;
        for v in 0..vocab {
            if support.contains(&(v as u32)) {
                continue;
            }
            match best {
                None => best = Some(v),
                Some(b) if probs[v] > probs[b] => best = Some(v),
                _ => {}
            }
        }
        support.insert(best.unwrap() as u32);
    }

    let mut entropy = 0.0;
    for v in 0..vocab {
        if probs[v] > 0.0 {
            entropy -= probs[v] * probs[v].ln();
        }
    }
    entropy /= (vocab as f64).ln();
    entropy = entropy.clamp(0.0, 1.0);

    let attn = |l: usize, h: usize, j: usize| -> f64 {
        let row = s
            .attention
            .iter()
            .find(|r| r.layer == l && r.head == h)
            .unwrap();
        row.weights[j] as f64
    };
    let norm = |l: usize, h: usize, j: usize| -> f64 {
        let kv = h / group;
        let row = s
            .value_norms
            .iter()
            .find(|r| r.layer == l && r.kv_head == kv)
            .unwrap();
        row.norms[j] as f64
    };

    // head weights
    let n = n_layers * n_heads;
    let uniform = vec![1.0 / n as f64; n];
    let weights = if cfg.no_hag {
        uniform.clone()
    } else {
        let mut raw = vec![0.0; n];
        for l in 0..n_layers {
            for h in 0..n_heads {
                let mut score = 0.0;
                for j in 0..ctx {
                    let mut count = 0;
                    for k in 0..ctx {
                        if s.context[k].token_id == s.context[j].token_id {
                            count += 1;
                        }
                    }
                    score += attn(l, h, j) / count as f64;
                }
                raw[l * n_heads + h] = score + GATE_EPS;
            }
        }
        let total: f64 = raw.iter().sum();
        let mut w: Vec<f64> = raw.iter().map(|x| (x / total).max(ETA)).collect();
        let total: f64 = w.iter().sum();
        for x in &mut w {
            *x /= total;
        }
        w
    };

    let keep: Vec<bool> = s
        .context
        .iter()
        .map(|t| !(cfg.special.contains(&t.token_id) || t.surface.trim().is_empty()))
        .collect();

    let evidence_for = |w: &[f64]| -> Vec<f64> {
        let mut u = vec![0.0; ctx];
        for l in 0..n_layers {
            for h in 0..n_heads {
                let mut kept_mass = 0.0;
                for j in 0..ctx {
                    if keep[j] {
                        kept_mass += attn(l, h, j);
                    }
                }
                let mut r = vec![0.0; ctx];
                for j in 0..ctx {
                    let a = if keep[j] {
                        attn(l, h, j) / (kept_mass + CAL_EPS)
                    } else {
                        0.0
                    };
                    r[j] = if cfg.no_vc { a } else { a * norm(l, h, j) };
                }
                if !cfg.no_vc {
                    let total: f64 = r.iter().sum();
                    for x in &mut r {
                        *x /= total + CAL_EPS;
                    }
                }
                for j in 0..ctx {
                    u[j] += w[l * n_heads + h] * r[j];
                }
            }
        }
        u
    };
    let restrict = |u: &[f64]| -> Option<BTreeMap<u32, f64>> {
        let mut m = BTreeMap::new();
        for j in 0..ctx {
            let id = s.context[j].token_id;
            if support.contains(&id) && u[j] != 0.0 {
                *m.entry(id).or_insert(0.0) += u[j];
            }
        }
        let mass: f64 = m.values().sum();
        if mass >= FALLBACK_TAU {
            for x in m.values_mut() {
                *x /= mass + CAL_EPS;
            }
            Some(m)
        } else {
            None
        }
    };

    let mut u_ctx = evidence_for(&weights);
    let mut fallback = false;
    let evidence = match restrict(&u_ctx) {
        Some(m) => m,
        None => {
            fallback = true;
            u_ctx = evidence_for(&uniform);
            restrict(&u_ctx).unwrap_or_default()
        }
    };

    let mut scores = probs.clone();
    for (&id, &u) in &evidence {
        scores[id as usize] = probs[id as usize] + cfg.alpha * entropy * u;
    }
    let mut chosen = 0;
    for v in 1..vocab {
        if scores[v] > scores[chosen] {
            chosen = v;
        }
    }
    RefOutput {
        probs,
        support,
        weights,
        u_ctx,
        evidence,
        entropy,
        scores,
        chosen: chosen as u32,
        fallback,
    }
}

/// Largest absolute difference over the union of keys.
pub fn max_abs_map(a: &BTreeMap<u32, f64>, b: &BTreeMap<u32, f64>) -> f64 {
    a.keys()
        .chain(b.keys())
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Checks the per-step invariants on one snapshot. Returns the first
/// failure as text.
pub fn check_invariants(s: &StepSnapshot, cfg: &have_core::HaveConfig) -> Result<(), String> {
    use have_core::decode_step;
    let out = decode_step(s, cfg).map_err(|e| e.to_string())?;

    // support preservation, bitwise
    for v in 0..out.probs.len() {
        if !out.evidence.vocab_scores.contains_key(&(v as u32))
            && out.scores[v].to_bits() != out.probs[v].to_bits()
        {
            return Err(format!("score of id {v} without evidence changed"));
        }
    }
    for id in out.evidence.vocab_scores.keys() {
        if !out.support.contains(id) {
            return Err(format!("evidence on id {id} outside support"));
        }
    }

    // head weights
    let w = &out.diagnostics.head_weights.weights.values;
    if w.iter().any(|&x| x.is_nan() || x <= 0.0) {
        return Err("non-positive head weight".into());
    }
    let wsum: f64 = w.iter().sum();
    if (wsum - 1.0).abs() > 1e-12 {
        return Err(format!("head weights sum to {wsum}"));
    }

    // sinks carry nothing
    for (t, &u) in s.context.iter().zip(&out.evidence.ctx_scores) {
        if cfg.calibration.sink_policy.is_sink(t.token_id, &t.surface) && u != 0.0 {
            return Err(format!("sink position {} carries {u}", t.position));
        }
    }

    // U_t mass
    if !out.evidence.vocab_scores.is_empty() {
        let m = out.evidence.mass();
        if (m - 1.0).abs() > 1e-6 {
            return Err(format!("evidence mass {m}"));
        }
        if out
            .evidence
            .vocab_scores
            .values()
            .any(|&u| u.is_nan() || u < 0.0)
        {
            return Err("negative evidence".into());
        }
    }

    if !(0.0..=1.0).contains(&out.entropy) {
        return Err(format!("entropy {} outside [0, 1]", out.entropy));
    }

    // alpha = 0 is greedy
    let mut zero = cfg.clone();
    zero.fusion.alpha = 0.0;
    let g = decode_step(s, &zero).map_err(|e| e.to_string())?;
    let greedy = have_core::fusion::greedy_step(s).map_err(|e| e.to_string())?;
    if g.chosen != greedy {
        return Err(format!(
            "alpha=0 chose {} but greedy chose {greedy}",
            g.chosen
        ));
    }
    Ok(())
}

/// GQA group sizes 1/2/4 x window on/off x two seeds.
pub fn live_grid() -> Vec<have_core::ToyConfig> {
    let mut out = Vec::new();
    for kv_heads in [4, 2, 1] {
        for window in [None, Some(12)] {
            for seed in [11, 29] {
                out.push(have_core::ToyConfig {
                    vocab: 96,
                    layers: 2,
                    heads: 4,
                    kv_heads,
                    head_dim: 8,
                    max_context: 128,
                    window,
                    seed,
                });
            }
        }
    }
    out
}

/// Live decode, record, serialize, read back, replay. Returns the first
/// mismatch as text.
pub fn live_matches_replay(cfg: have_core::ToyConfig, steps: usize) -> Result<(), String> {
    use have_core::harness::{generate, Source};
    use have_core::{Policy, ToyModel};
    let model = ToyModel::new(cfg).map_err(|e| e.to_string())?;
    let mut have = have_core::HaveConfig::default();
    have.calibration.sink_policy = model.tokenizer().sink_policy();
    let policy = Policy::have(have);
    let prompt: Vec<u32> = std::iter::once(0)
        .chain((0..10).map(|i| 3 + (i * 7 + cfg.seed as u32) % 90))
        .chain([2, 5])
        .collect();

    let live = generate(Source::Model(&model), &prompt, &policy, steps, None)
        .map_err(|e| e.to_string())?;
    let (trace, ids) = have_core::toy::run_and_trace(&model, &prompt, steps, &policy)
        .map_err(|e| e.to_string())?;
    if ids != live.ids {
        return Err("recording run diverged from live run".into());
    }
    let mut bytes = Vec::new();
    have_core::write_trace(&trace, &mut bytes).map_err(|e| e.to_string())?;
    let back = have_core::read_trace(bytes.as_slice()).map_err(|e| e.to_string())?;
    let replay =
        generate(Source::Trace(&back), &[], &policy, steps, None).map_err(|e| e.to_string())?;
    if replay.ids != live.ids {
        return Err(format!(
            "ids differ: live {:?} replay {:?}",
            live.ids, replay.ids
        ));
    }
    for (t, (a, b)) in live.steps.iter().zip(&replay.steps).enumerate() {
        let same = a.scores.len() == b.scores.len()
            && a.scores
                .iter()
                .zip(&b.scores)
                .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(format!("scores differ at step {t}"));
        }
    }
    Ok(())
}

/// Random trace with arbitrary float bit patterns and unicode surfaces.
pub fn random_trace(seed: u64) -> have_core::TraceFile {
    use have_core::synth::random_snapshot_with;
    use have_core::{ModelDims, TraceFile, TraceHeader};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let kv = [1, heads][rng.random_range(0..2)];
    let dims = ModelDims::new(rng.random_range(2..40), rng.random_range(1..4), heads, kv);
    let names = ["", "toy-words-v1", "gpt2", "ünïcødé ▁tok"];
    let mut trace = TraceFile::new(TraceHeader::new(
        dims,
        rng.random(),
        names[rng.random_range(0..4)],
    ));
    let specials = [
        0.0f32,
        -0.0,
        f32::MIN_POSITIVE / 4.0,
        f32::MAX,
        f32::INFINITY,
        f32::NAN,
    ];
    let surfaces = ["", " ", "▁the", "é", "日本", "\n", "<s>"];
    let mut step = rng.random_range(0..100u64);
    for _ in 0..rng.random_range(0..6) {
        let ctx = rng.random_range(1..20);
        let mut s = random_snapshot_with(&mut rng, dims, ctx);
        step += rng.random_range(1..5);
        s.step = step;
        for t in &mut s.context {
            if rng.random_bool(0.3) {
                t.surface = surfaces[rng.random_range(0..surfaces.len())].to_string();
                t.is_sink = rng.random();
            }
        }
        for z in &mut s.logits {
            if rng.random_bool(0.1) {
                *z = if rng.random_bool(0.5) {
                    specials[rng.random_range(0..specials.len())]
                } else {
                    f32::from_bits(rng.random())
                };
            }
        }
        trace.snapshots.push(s);
    }
    trace
}

/// Bitwise comparison (NaN payloads included).
pub fn traces_bit_equal(a: &have_core::TraceFile, b: &have_core::TraceFile) -> bool {
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.header == b.header
        && a.snapshots.len() == b.snapshots.len()
        && a.snapshots.iter().zip(&b.snapshots).all(|(x, y)| {
            x.step == y.step
                && x.context == y.context
                && bits(&x.logits) == bits(&y.logits)
                && x.attention.len() == y.attention.len()
                && x.attention.iter().zip(&y.attention).all(|(p, q)| {
                    (p.layer, p.head) == (q.layer, q.head) && bits(&p.weights) == bits(&q.weights)
                })
                && x.value_norms.iter().zip(&y.value_norms).all(|(p, q)| {
                    (p.layer, p.kv_head) == (q.layer, q.kv_head) && bits(&p.norms) == bits(&q.norms)
                })
        })
}

/// Write, read, write again: both byte streams and the decoded structure
/// must agree.
pub fn round_trip(t: &have_core::TraceFile) -> Result<(), String> {
    let mut first = Vec::new();
    have_core::write_trace(t, &mut first).map_err(|e| e.to_string())?;
    let back = have_core::read_trace(first.as_slice()).map_err(|e| e.to_string())?;
    let mut second = Vec::new();
    have_core::write_trace(&back, &mut second).map_err(|e| e.to_string())?;
    if first != second {
        return Err("re-encoded bytes differ".into());
    }
    if !traces_bit_equal(t, &back) {
        return Err("decoded trace differs".into());
    }
    Ok(())
}
