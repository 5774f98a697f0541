//! One optimisation step: EMA update, momentum pass, online passes, negative
//! sampling, losses, backward, AdamW, enqueue.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimState};
use super::{lr_schedule, TrainConfig, TrainError};
use crate::data::{derive_seed, Batch};
use crate::diffcore::{Float, Tape, Tensor, Var};
use crate::encoders::{Bound, Encoders, Image, Modality, ModelConfig, ParamStore, TokenSeq};
use crate::losses::{
    box_loss, itc_mcd_loss, match_bce, rg_itc_loss, sample_global_negatives, sample_hard_negatives, total_loss,
    LossBreakdown, LossVars,
};
use crate::momentum::{soft_targets, MomentumParams, MomentumQueue};

/// Global unit embeddings `[n, d']` of images and captions under `params`,
/// computed without recording gradients.
pub fn global_embeddings<T: Float>(
    model: &ModelConfig,
    params: &ParamStore<T>,
    images: &[&Image],
    captions: &[&TokenSeq],
) -> Result<(Tensor<T>, Tensor<T>), TrainError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let enc = Encoders::new(model, &bound);
    let v = enc.encode_images(&mut tape, images)?;
    let t = enc.encode_text(&mut tape, captions)?;
    let zv = enc.project(&mut tape, v.cls, Modality::Vision)?;
    let zt = enc.project(&mut tape, t.out.cls, Modality::Text)?;
    Ok((tape.value(zv).clone(), tape.value(zt).clone()))
}

/// Records every enabled loss for `batch` on `tape` and returns the weighted
/// total. `bound` holds the online parameters; `z_v_m`, `z_t_m` are this
/// step's momentum embeddings and the queues hold earlier ones.
#[allow(clippy::too_many_arguments)]
pub fn record_losses<T: Float, R: Rng>(
    tape: &mut Tape<T>,
    cfg: &TrainConfig,
    bound: &Bound,
    batch: &Batch,
    z_v_m: &Tensor<T>,
    z_t_m: &Tensor<T>,
    queues: (&MomentumQueue, &MomentumQueue),
    rng: &mut R,
) -> Result<(Var, LossBreakdown), TrainError> {
    let toggles = cfg.toggles;
    let weights = cfg.weights.effective(&toggles);
    let enc = Encoders::new(&cfg.model, bound);
    let n = batch.len();
    let images: Vec<&Image> = batch.images.iter().collect();
    let captions: Vec<&TokenSeq> = batch.captions.iter().collect();

    let gv = enc.encode_images(tape, &images)?;
    let gt = enc.encode_text(tape, &captions)?;
    let z_v = enc.project(tape, gv.cls, Modality::Vision)?;
    let z_t = enc.project(tape, gt.out.cls, Modality::Text)?;
    let mut vars = LossVars::default();

    // global contrastive term over batch (and, with MC, queue) candidates
    let alpha = if toggles.md { cfg.alpha } else { 0.0 };
    let (cand_v_m, cand_t_m) = if toggles.mc {
        (queues.0.candidate_set(z_v_m)?, queues.1.candidate_set(z_t_m)?)
    } else {
        (z_v_m.clone(), z_t_m.clone())
    };
    let targets = soft_targets(z_v_m, z_t_m, &cand_v_m, &cand_t_m, alpha, cfg.tau)?;
    let (cand_v, cand_t) = if toggles.mc {
        (tape.constant(cand_v_m), tape.constant(cand_t_m))
    } else {
        (z_v, z_t)
    };
    vars.itc_mcd = Some(itc_mcd_loss(tape, z_v, z_t, cand_v, cand_t, &targets.q_i2t, &targets.q_t2i, cfg.tau)?);

    // global matching: positives, one negative text per image, one negative image per text
    let negs = sample_global_negatives(tape.value(z_v), tape.value(z_t), cfg.tau, rng)?;
    let mut v_idx: Vec<usize> = (0..n).collect();
    let mut t_idx: Vec<usize> = (0..n).collect();
    v_idx.extend(0..n);
    t_idx.extend(&negs.text_for_image);
    v_idx.extend(&negs.image_for_text);
    t_idx.extend(0..n);
    let fused = enc.fuse(tape, &gv, &v_idx, &gt, &t_idx)?;
    let logits = enc.match_head(tape, fused.cls)?;
    let labels: Vec<bool> = (0..3 * n).map(|p| p < n).collect();
    vars.itm = Some(match_bce(tape, logits, &labels)?);

    if toggles.rg_itc || toggles.rg_itm {
        let r = batch.num_regions();
        let owner = &batch.region_sample;
        let region_images: Vec<&Image> = batch.region_images.iter().collect();
        let region_texts: Vec<&TokenSeq> = batch.region_texts.iter().collect();
        let rv = enc.encode_images(tape, &region_images)?;
        let rt = enc.encode_text(tape, &region_texts)?;
        let z_v_r = enc.project(tape, rv.cls, Modality::Vision)?;
        let z_t_r = enc.project(tape, rt.out.cls, Modality::Text)?;

        if toggles.rg_itc {
            let zvm = tape.constant(z_v_m.clone());
            let ztm = tape.constant(z_t_m.clone());
            vars.rg_itc = Some(rg_itc_loss(tape, z_v_r, z_t_r, owner, zvm, ztm, cfg.tau)?);
        }

        if toggles.rg_itm {
            let hn = sample_hard_negatives(
                tape.value(z_v_r),
                tape.value(z_t_r),
                owner,
                tape.value(z_v),
                tape.value(z_t),
                cfg.tau,
                rng,
            )?;
            // region vision with global text: positives then negatives
            let regions: Vec<usize> = (0..r).collect();
            let rv_idx: Vec<usize> = regions.iter().chain(&regions).copied().collect();
            let gt_idx: Vec<usize> = owner.iter().chain(&hn.j_neg).copied().collect();
            let h_rv_gt = enc.fuse(tape, &rv, &rv_idx, &gt, &gt_idx)?;
            // global vision with region text: positives then negatives
            let gv_idx: Vec<usize> = owner.iter().chain(&hn.l_neg).copied().collect();
            let h_gv_rt = enc.fuse(tape, &gv, &gv_idx, &rt, &rv_idx)?;

            let l1 = enc.match_head(tape, h_rv_gt.cls)?;
            let l2 = enc.match_head(tape, h_gv_rt.cls)?;
            let logits = tape.concat_rows(&[l1, l2])?;
            let labels: Vec<bool> = (0..4 * r).map(|p| p % (2 * r) < r).collect();
            vars.rg_itm = Some(match_bce(tape, logits, &labels)?);

            let positives = tape.gather_rows(h_gv_rt.cls, &regions)?;
            let boxes = enc.box_head(tape, positives)?;
            vars.box_ = Some(box_loss(tape, boxes, &batch.region_boxes, cfg.box_weights)?);
        }
    }
    Ok(total_loss(tape, &vars, &weights)?)
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub params: ParamStore<T>,
    pub shadow: MomentumParams<T>,
    pub optim: OptimState<T>,
    pub queue_v: MomentumQueue,
    pub queue_t: MomentumQueue,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub total_steps: u64,
}

impl<T: Float> TrainState<T> {
    /// Fresh parameters and state derived from `config.seed`.
    pub fn new(config: TrainConfig, total_steps: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let params = ParamStore::init(&config.model, &mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1, 0)));
        let shadow = MomentumParams::from_online(&params);
        let optim = OptimState::new(&params, AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() });
        let queue_v = MomentumQueue::new(config.queue_capacity, config.model.embed_dim)?;
        let queue_t = queue_v.clone();
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2, 0));
        Ok(TrainState { config, params, shadow, optim, queue_v, queue_t, rng, step: 0, total_steps })
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.step, self.total_steps, self.config.lr)
    }

    /// Runs one step. On any error, including a non-finite loss or gradient,
    /// the state is left exactly as it was.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown, TrainError> {
        let cfg = &self.config;
        let mut shadow = self.shadow.clone();
        shadow.ema_update(&self.params, cfg.beta)?;
        let images: Vec<&Image> = batch.images.iter().collect();
        let captions: Vec<&TokenSeq> = batch.captions.iter().collect();
        let (z_v_m, z_t_m) = global_embeddings(&cfg.model, &shadow.params, &images, &captions)?;

        let mut rng = self.rng.clone();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let (total, breakdown) =
            record_losses(&mut tape, cfg, &bound, batch, &z_v_m, &z_t_m, (&self.queue_v, &self.queue_t), &mut rng)?;
        if !breakdown.total.is_finite() || breakdown.parts().iter().any(|p| !p.is_finite()) {
            return Err(TrainError::NonFinite(format!("loss at step {}: {breakdown:?}", self.step)));
        }
        tape.backward(total)?;
        let mut grads = bound.grads(&tape);
        drop(tape);
        clip_grad_norm(&mut grads, cfg.grad_clip);

        let lr = self.lr();
        let mut params = self.params.clone();
        let mut optim = self.optim.clone();
        adamw_step(&mut params, &grads, &mut optim, lr)?;
        let mut queue_v = self.queue_v.clone();
        let mut queue_t = self.queue_t.clone();
        queue_v.enqueue(&z_v_m)?;
        queue_t.enqueue(&z_t_m)?;

        self.params = params;
        self.optim = optim;
        self.shadow = shadow;
        self.queue_v = queue_v;
        self.queue_t = queue_t;
        self.rng = rng;
        self.step += 1;
        Ok(breakdown)
    }
}
