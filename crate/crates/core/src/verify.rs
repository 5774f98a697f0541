//! Built-in property suites: finite-difference gradients of every loss through
//! the full model, loss and metric oracles, momentum mechanics, GIoU
//! properties, ROI Align, and negative-sampling fidelity.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{assemble, generate_scene, Batch, GenConfig, SplitSizes, Split};
use crate::diffcore::{finite_difference_check, DiffError, Tape, Tensor};
use crate::encoders::{bilinear, roi_align, Image, ModelConfig, ParamStore, RegionBox, Sampling, Vocab};
use crate::eval::{recall_at_k, ScoreMatrix};
use crate::losses::{giou_corners, itc_mcd_loss, negative_probabilities, rg_itc_loss, sample_excluding, LossError, LossWeights, Toggles};
use crate::momentum::{soft_targets, MomentumParams, MomentumQueue};
use crate::train::{global_embeddings, record_losses, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Oracles,
    Sampling,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gradients" => Ok(Suite::Gradients),
            "oracles" => Ok(Suite::Oracles),
            "sampling" => Ok(Suite::Sampling),
            "all" => Ok(Suite::All),
            other => Err(format!("unknown suite '{other}' (gradients, oracles, sampling, all)")),
        }
    }
}

/// Outcome of one named invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult { name: name.to_string(), passed, detail }
    }

    fn from_error(name: &str, e: impl fmt::Display) -> Self {
        CheckResult::new(name, false, format!("error: {e}"))
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-6;
pub const TV_TOLERANCE: f64 = 0.05;

pub fn run_suite(suite: Suite) -> Vec<CheckResult> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Gradients | Suite::All) {
        out.extend(gradient_checks());
    }
    if matches!(suite, Suite::Oracles | Suite::All) {
        out.extend(oracle_checks(0));
        out.extend(giou_checks(giou_corners));
    }
    if matches!(suite, Suite::Sampling | Suite::All) {
        out.extend(sampling_checks(0));
    }
    out
}

// ---------------------------------------------------------------- gradients

/// The smallest model the encoders accept with more than one patch.
pub fn micro_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch: 8,
        width: 8,
        heads: 2,
        layers: 1,
        fusion_layers: 1,
        mlp_ratio: 2,
        embed_dim: 4,
        text_len: 32,
        region_text_len: 16,
        ..ModelConfig::default()
    }
}

/// Two 16-pixel scenes with exactly two regions each.
pub fn micro_batch() -> Result<Batch, String> {
    let cfg = GenConfig {
        image_size: 16,
        grid: 4,
        min_regions: 2,
        max_regions: 2,
        ambiguity: 0.0,
        splits: SplitSizes { train: 2, val: 0, test: 0, heldout: 0 },
        ..GenConfig::default()
    };
    let mut scenes = Vec::new();
    let mut index = 0;
    while scenes.len() < 2 && index < 64 {
        if let Ok(s) = generate_scene(&cfg, Split::Train, index, 17 + index as u64) {
            scenes.push(s);
        }
        index += 1;
    }
    if scenes.len() < 2 {
        return Err("could not place two micro scenes".into());
    }
    let refs: Vec<_> = scenes.iter().collect();
    let model = micro_model();
    assemble(&refs, &Vocab::builtin(), model.text_len, model.region_text_len).map_err(|e| e.to_string())
}

struct GradCase {
    loss: &'static str,
    toggles: Toggles,
    weights: LossWeights,
    params: &'static [&'static str],
}

fn only(f: impl Fn(&mut LossWeights)) -> LossWeights {
    let mut w = LossWeights { itc: 0.0, itm: 0.0, rg_itc: 0.0, rg_itm: 0.0, box_: 0.0 };
    f(&mut w);
    w
}

fn grad_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            loss: "itc_mcd",
            toggles: Toggles::default(),
            weights: only(|w| w.itc = 1.0),
            params: &["proj_v.w", "proj_t.w", "vision.blocks.0.attn.q.w", "text.blocks.0.mlp.fc2.w"],
        },
        GradCase {
            loss: "itm",
            toggles: Toggles::NONE,
            weights: only(|w| w.itm = 1.0),
            params: &["match_head.w", "fusion.blocks.0.cross_attn.v.w", "fusion.blocks.0.ln_kv.g"],
        },
        GradCase {
            loss: "rg_itc",
            toggles: Toggles { rg_itc: true, ..Toggles::NONE },
            weights: only(|w| w.rg_itc = 1.0),
            params: &["proj_v.w", "proj_t.w", "vision.patch.w"],
        },
        GradCase {
            loss: "rg_itm",
            toggles: Toggles { rg_itm: true, ..Toggles::NONE },
            weights: only(|w| w.rg_itm = 1.0),
            params: &["match_head.w", "fusion.blocks.0.cross_attn.k.w", "fusion.blocks.0.self_attn.o.w"],
        },
        GradCase {
            loss: "box",
            toggles: Toggles { rg_itm: true, ..Toggles::NONE },
            weights: only(|w| w.box_ = 1.0),
            params: &["box_head.w", "box_head.b", "fusion.blocks.0.mlp.fc1.w"],
        },
    ]
}

/// Central finite differences of each loss, in 64-bit, with respect to
/// parameter tensors on its path through the model.
pub fn gradient_checks() -> Vec<CheckResult> {
    let batch = match micro_batch() {
        Ok(b) => b,
        Err(e) => return vec![CheckResult::from_error("gradients micro-batch", e)],
    };
    let model = micro_model();
    let params = ParamStore::<f64>::init(&model, &mut ChaCha8Rng::seed_from_u64(3));
    let images: Vec<&Image> = batch.images.iter().collect();
    let captions: Vec<_> = batch.captions.iter().collect();
    let (zv_m, zt_m) = match global_embeddings(&model, &params, &images, &captions) {
        Ok(z) => z,
        Err(e) => return vec![CheckResult::from_error("gradients momentum pass", e)],
    };
    // two earlier batches in a queue of four, so distillation sees extra candidates
    let mut queue_v = MomentumQueue::new(4, model.embed_dim).expect("4 rows of a positive width");
    let mut queue_t = MomentumQueue::new(4, model.embed_dim).expect("4 rows of a positive width");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2 {
        let _ = queue_v.enqueue(&random_unit_rows(&mut rng, 2, model.embed_dim));
        let _ = queue_t.enqueue(&random_unit_rows(&mut rng, 2, model.embed_dim));
    }

    let mut out = Vec::new();
    for case in grad_cases() {
        let cfg = TrainConfig {
            model: model.clone(),
            toggles: case.toggles,
            weights: case.weights,
            ..TrainConfig::default()
        };
        let mut worst = 0.0f64;
        let mut failure = None;
        for &name in case.params {
            let Some(x) = params.get(name) else {
                failure = Some(format!("no parameter '{name}'"));
                break;
            };
            let f = |tape: &mut Tape<f64>, xv| -> Result<_, DiffError> {
                let mut bound = params.bind(tape, false);
                bound.replace(name, xv);
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let (total, _) = record_losses(tape, &cfg, &bound, &batch, &zv_m, &zt_m, (&queue_v, &queue_t), &mut rng)
                    .map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
                Ok(total)
            };
            match finite_difference_check(f, x, 1e-5) {
                Ok(e) => worst = worst.max(e),
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        let name = format!("gradient {}", case.loss);
        out.push(match failure {
            Some(e) => CheckResult::from_error(&name, e),
            None => CheckResult::new(
                &name,
                worst < GRAD_TOLERANCE,
                format!("max relative error {worst:.2e} over {} tensors (< {GRAD_TOLERANCE:.0e})", case.params.len()),
            ),
        });
    }
    out
}

// ---------------------------------------------------------------- oracles

fn random_unit_rows<R: Rng>(rng: &mut R, n: usize, d: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(vec![n, d], data).expect("shape matches")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-log softmax(logits)[target]` by direct summation.
fn nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

fn infonce_scalar(zv: &Tensor<f64>, zt: &Tensor<f64>, tau: f64) -> f64 {
    let n = zv.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        let i2t: Vec<f64> = (0..n).map(|j| dot(zv.row(i), zt.row(j)) / tau).collect();
        let t2i: Vec<f64> = (0..n).map(|j| dot(zt.row(i), zv.row(j)) / tau).collect();
        total += nll(&i2t, i) + nll(&t2i, i);
    }
    total / (2 * n) as f64
}

fn rg_itc_scalar(rv: &Tensor<f64>, rt: &Tensor<f64>, sample: &[usize], zv_m: &Tensor<f64>, zt_m: &Tensor<f64>, tau: f64) -> f64 {
    let n = zv_m.shape()[0];
    let mut total = 0.0;
    for (r, &i) in sample.iter().enumerate() {
        let a: Vec<f64> = (0..n).map(|j| dot(rv.row(r), zt_m.row(j)) / tau).collect();
        let b: Vec<f64> = (0..n).map(|l| dot(rt.row(r), zv_m.row(l)) / tau).collect();
        total += nll(&a, i) + nll(&b, i);
    }
    total / (2 * sample.len()) as f64
}

fn check_itc_oracle(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let tau = 0.07;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..7);
        let d = rng.gen_range(2..9);
        let zv = random_unit_rows(rng, n, d);
        let zt = random_unit_rows(rng, n, d);
        let empty = MomentumQueue::new(0, d).map_err(|e| e.to_string())?;
        let cv = empty.candidate_set(&zv).map_err(|e| e.to_string())?;
        let ct = empty.candidate_set(&zt).map_err(|e| e.to_string())?;
        let q = soft_targets(&zv, &zt, &cv, &ct, 0.0, tau).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let (v, t) = (tape.constant(zv.clone()), tape.constant(zt.clone()));
        let (c_v, c_t) = (tape.constant(cv), tape.constant(ct));
        let loss = itc_mcd_loss(&mut tape, v, t, c_v, c_t, &q.q_i2t, &q.q_t2i, tau).map_err(|e| e.to_string())?;
        worst = worst.max((tape.value(loss).item() - infonce_scalar(&zv, &zt, tau)).abs());
    }
    Ok(worst)
}

fn check_rg_itc_oracle(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let tau = 0.07;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..6);
        let d = rng.gen_range(2..9);
        let regions = rng.gen_range(1..10);
        let sample: Vec<usize> = (0..regions).map(|_| rng.gen_range(0..n)).collect();
        let (rv, rt) = (random_unit_rows(rng, regions, d), random_unit_rows(rng, regions, d));
        let (zv, zt) = (random_unit_rows(rng, n, d), random_unit_rows(rng, n, d));
        let mut tape = Tape::new();
        let vars = [&rv, &rt, &zv, &zt].map(|t| tape.constant(t.clone()));
        let loss = rg_itc_loss(&mut tape, vars[0], vars[1], &sample, vars[2], vars[3], tau).map_err(|e| e.to_string())?;
        worst = worst.max((tape.value(loss).item() - rg_itc_scalar(&rv, &rt, &sample, &zv, &zt, tau)).abs());
    }
    Ok(worst)
}

fn check_ema(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let beta = 0.995;
    let init: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let online_v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let store = |v: &[f64]| {
        let mut s = ParamStore::<f64>::default();
        s.insert("proj_v.w".into(), Tensor::new(vec![2, 3], v.to_vec()).expect("2x3"));
        s
    };
    let mut shadow = MomentumParams::from_online(&store(&init));
    let online = store(&online_v);
    let mut worst = 0.0f64;
    for k in 1..=50 {
        shadow.ema_update(&online, beta).map_err(|e| e.to_string())?;
        let decay = beta.powi(k);
        let got = shadow.params.get("proj_v.w").ok_or("tracked tensor missing")?;
        for (i, g) in got.data().iter().enumerate() {
            worst = worst.max((g - (decay * init[i] + (1.0 - decay) * online_v[i])).abs());
        }
    }
    Ok(worst)
}

fn check_queue(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..4);
        let cap = n * rng.gen_range(0..5);
        let d = 3;
        let mut queue = MomentumQueue::new(cap, d).map_err(|e| e.to_string())?;
        let mut reference: VecDeque<Vec<f64>> = VecDeque::new();
        for _ in 0..rng.gen_range(0..12) {
            let batch = random_unit_rows(rng, n, d);
            queue.enqueue(&batch).map_err(|e| e.to_string())?;
            if cap > 0 {
                for r in 0..n {
                    if reference.len() == cap {
                        reference.pop_front();
                    }
                    reference.push_back(batch.row(r).to_vec());
                }
            }
        }
        let rows = queue.rows();
        let same = rows.len() == reference.len()
            && reference.iter().enumerate().all(|(i, r)| r.iter().zip(rows[i]).all(|(a, b)| (a - b).abs() < 1e-12));
        mismatches += usize::from(!same);
    }
    Ok(mismatches)
}

fn check_soft_targets(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..6);
        let extra = rng.gen_range(0..6);
        let alpha = rng.gen_range(0.0..=1.0);
        let (zv, zt) = (random_unit_rows(rng, n, 4), random_unit_rows(rng, n, 4));
        let (cv, ct) = (random_unit_rows(rng, n + extra, 4), random_unit_rows(rng, n + extra, 4));
        let q = soft_targets(&zv, &zt, &cv, &ct, alpha, 0.07).map_err(|e| e.to_string())?;
        for t in [&q.q_i2t, &q.q_t2i] {
            for i in 0..n {
                worst = worst.max((t.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok(worst)
}

/// Bilinear sampling written as a sum of tent weights over every pixel.
fn tent_sample(img: &Image, y: f64, x: f64, c: usize) -> f64 {
    let py = (y - 0.5).clamp(0.0, (img.height() - 1) as f64);
    let px = (x - 0.5).clamp(0.0, (img.width() - 1) as f64);
    let mut acc = 0.0;
    for i in 0..img.height() {
        for j in 0..img.width() {
            let w = (1.0 - (py - i as f64).abs()).max(0.0) * (1.0 - (px - j as f64).abs()).max(0.0);
            acc += w * img.get(i, j, c) as f64;
        }
    }
    acc
}

fn check_roi_align(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let size = 8;
    let pixels: Vec<f32> = (0..size * size * 3).map(|_| rng.gen()).collect();
    let img = Image::new(size, size, pixels).map_err(|e| e.to_string())?;
    let out = 3;
    let mut worst = 0.0f64;
    for y1 in 0..6 {
        for x1 in 0..6 {
            for y2 in y1 + 2..=size {
                for x2 in x1 + 2..=size {
                    let s = size as f64;
                    let b = RegionBox::from_corners(x1 as f64 / s, y1 as f64 / s, x2 as f64 / s, y2 as f64 / s)
                        .map_err(|e| e.to_string())?;
                    let got = roi_align(&img, &b, out, out, Sampling::Adaptive).map_err(|e| e.to_string())?;
                    let (bh, bw) = ((y2 - y1) as f64 / out as f64, (x2 - x1) as f64 / out as f64);
                    let (gh, gw) = (bh.ceil() as usize, bw.ceil() as usize);
                    for oy in 0..out {
                        for ox in 0..out {
                            for c in 0..3 {
                                let mut acc = 0.0;
                                for iy in 0..gh {
                                    for ix in 0..gw {
                                        let y = y1 as f64 + bh * (oy as f64 + (iy as f64 + 0.5) / gh as f64);
                                        let x = x1 as f64 + bw * (ox as f64 + (ix as f64 + 0.5) / gw as f64);
                                        acc += tent_sample(&img, y, x, c);
                                    }
                                }
                                let want = acc / (gh * gw) as f64;
                                worst = worst.max((got.get(oy, ox, c) as f64 - want).abs());
                            }
                        }
                    }
                }
            }
        }
    }
    // the library sampler on its own against the tent form
    for _ in 0..200 {
        let (y, x) = (rng.gen_range(-1.0..9.0), rng.gen_range(-1.0..9.0));
        worst = worst.max((bilinear(&img, y, x, 1) - tent_sample(&img, y, x, 1)).abs());
    }
    Ok(worst)
}

fn check_recall(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut mismatches = 0;
    for _ in 0..100 {
        let q = rng.gen_range(1..15);
        let g = rng.gen_range(10..25);
        // coarse values make ties common
        let data: Vec<f64> = (0..q * g).map(|_| rng.gen_range(0..6) as f64).collect();
        let truth: Vec<usize> = (0..q).map(|_| rng.gen_range(0..g)).collect();
        let s = ScoreMatrix::new(q, g, data.clone()).map_err(|e| e.to_string())?;
        let got = recall_at_k(&s, &truth, &[1, 5, 10]).map_err(|e| e.to_string())?;
        for (ki, k) in [1usize, 5, 10].into_iter().enumerate() {
            let hits = (0..q)
                .filter(|&i| {
                    let row = &data[i * g..(i + 1) * g];
                    let t = truth[i];
                    let ahead = (0..g).filter(|&j| row[j] > row[t] || (row[j] == row[t] && j < t)).count();
                    ahead < k
                })
                .count();
            if (got[ki] - 100.0 * hits as f64 / q as f64).abs() > 1e-12 {
                mismatches += 1;
            }
        }
    }
    Ok(mismatches)
}

/// Loss, momentum, ROI Align and metric oracles.
pub fn oracle_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut float = |name: &str, r: Result<f64, String>, tol: f64| {
        out.push(match r {
            Ok(e) => CheckResult::new(name, e <= tol, format!("max deviation {e:.2e} (<= {tol:.0e})")),
            Err(e) => CheckResult::from_error(name, e),
        })
    };
    float("itc_mcd matches InfoNCE", check_itc_oracle(&mut rng), ORACLE_TOLERANCE);
    float("rg_itc matches scalar recomputation", check_rg_itc_oracle(&mut rng), ORACLE_TOLERANCE);
    float("ema closed form", check_ema(&mut rng), 1e-5);
    float("soft-target rows sum to one", check_soft_targets(&mut rng), ORACLE_TOLERANCE);
    float("roi_align matches bilinear oracle", check_roi_align(&mut rng), ORACLE_TOLERANCE);
    let mut count = |name: &str, r: Result<usize, String>| {
        out.push(match r {
            Ok(0) => CheckResult::new(name, true, "no mismatches".into()),
            Ok(m) => CheckResult::new(name, false, format!("{m} mismatches")),
            Err(e) => CheckResult::from_error(name, e),
        })
    };
    count("queue matches deque simulation", check_queue(&mut rng));
    count("recall_at_k matches ranking oracle", check_recall(&mut rng));
    out
}

/// GIoU symmetry, range, identity, and the half-overlap-hull corner case, for
/// any implementation with the signature of [`giou_corners`].
pub fn giou_checks<F>(giou: F) -> Vec<CheckResult>
where
    F: Fn([f64; 4], [f64; 4]) -> Result<f64, LossError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut random_box = || {
        let (x1, y1) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
        [x1, y1, x1 + rng.gen_range(0.05..0.2), y1 + rng.gen_range(0.05..0.2)]
    };
    let pairs: Vec<([f64; 4], [f64; 4])> = (0..500).map(|_| (random_box(), random_box())).collect();
    let mut out = Vec::new();
    let eval = |a, b| giou(a, b).map_err(|e| e.to_string());

    let sym = pairs.iter().try_fold(0.0f64, |w, (a, b)| Ok::<_, String>(w.max((eval(*a, *b)? - eval(*b, *a)?).abs())));
    out.push(match sym {
        Ok(w) => CheckResult::new("giou symmetry", w <= 1e-12, format!("max |g(a,b) - g(b,a)| = {w:.2e}")),
        Err(e) => CheckResult::from_error("giou symmetry", e),
    });
    let range = pairs.iter().try_fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
        let g = eval(*a, *b)?;
        Ok::<_, String>((lo.min(g), hi.max(g)))
    });
    out.push(match range {
        Ok((lo, hi)) => CheckResult::new("giou range", lo >= -1.0 && hi <= 1.0, format!("observed [{lo:.4}, {hi:.4}]")),
        Err(e) => CheckResult::from_error("giou range", e),
    });
    let ident = pairs.iter().try_fold(0.0f64, |w, (a, _)| Ok::<_, String>(w.max((eval(*a, *a)? - 1.0).abs())));
    out.push(match ident {
        Ok(w) => CheckResult::new("giou identity", w <= 1e-9, format!("max |g(a,a) - 1| = {w:.2e}")),
        Err(e) => CheckResult::from_error("giou identity", e),
    });
    // unit squares at opposite corners of a 2x2 hull: 0 - (4 - 2) / 4 = -0.5
    let corner = eval([0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 2.0, 2.0]);
    out.push(match corner {
        Ok(g) => CheckResult::new("giou disjoint corners", (g + 0.5).abs() <= 1e-9, format!("{g} (expected -0.5)")),
        Err(e) => CheckResult::from_error("giou disjoint corners", e),
    });
    out
}

// ---------------------------------------------------------------- sampling

/// Total variation between empirical hard-negative frequencies and their
/// softmax probabilities, at 10,000 draws for each of 20 score vectors.
pub fn sampling_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(3..12);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let exclude = rng.gen_range(0..n);
        let tau = rng.gen_range(0.05..1.0);
        let p = match negative_probabilities(&scores, exclude, tau) {
            Ok(p) => p,
            Err(e) => return vec![CheckResult::from_error("hard-negative sampling", e)],
        };
        let mut counts = vec![0usize; n];
        for _ in 0..10_000 {
            match sample_excluding(&scores, exclude, tau, &mut rng) {
                Ok(j) => counts[j] += 1,
                Err(e) => return vec![CheckResult::from_error("hard-negative sampling", e)],
            }
        }
        if counts[exclude] > 0 {
            return vec![CheckResult::new("hard-negative sampling", false, "drew the positive".into())];
        }
        let tv = 0.5 * counts.iter().zip(&p).map(|(c, q)| (*c as f64 / 10_000.0 - q).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    vec![CheckResult::new(
        "hard-negative sampling",
        worst < TV_TOLERANCE,
        format!("max total variation {worst:.4} over 20 configurations (< {TV_TOLERANCE})"),
    )]
}
