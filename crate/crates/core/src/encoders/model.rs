//! Forward passes of the image, text and fusion encoders plus the projection,
//! matching and box heads.

use super::{Bound, EncoderError, Image, ModelConfig, TokenSeq};
use crate::diffcore::{Float, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// A batch of encoded sequences `[b, l, d]`; `cls` is row 0 of each.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub seq: Var,
    pub cls: Var,
}

/// Which projection a [CLS] feature goes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Text,
}

/// Text sequences encoded together with their attention masks (needed again
/// when the text acts as fusion queries).
#[derive(Clone, Debug)]
pub struct TextOutput {
    pub out: EncoderOutput,
    pub mask: Vec<bool>,
    pub len: usize,
}

/// Forward passes over one set of bound parameters.
pub struct Encoders<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a Bound,
}

impl<'a> Encoders<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a Bound) -> Self {
        Encoders { cfg, params }
    }

    fn p(&self, name: &str) -> Var {
        self.params.var(name)
    }

    fn linear<T: Float>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var, EncoderError> {
        let y = tape.matmul(x, self.p(&format!("{prefix}.w")))?;
        match self.params.try_var(&format!("{prefix}.b")) {
            Some(b) => Ok(tape.add_broadcast(y, b)?),
            None => Ok(y),
        }
    }

    fn norm<T: Float>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var, EncoderError> {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }

    fn mlp<T: Float>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var, EncoderError> {
        let h = self.linear(tape, &format!("{prefix}.fc1"), x)?;
        let h = tape.gelu(h);
        self.linear(tape, &format!("{prefix}.fc2"), h)
    }

    /// Multi-head attention with queries from `xq` and keys/values from `xkv`.
    /// When `kv_index` is given, keys and values are projected once per item
    /// of `xkv` and then gathered per query item.
    fn attend<T: Float>(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        xq: Var,
        xkv: Var,
        kv_index: Option<&[usize]>,
        mask: Option<&[bool]>,
    ) -> Result<Var, EncoderError> {
        let q = self.linear(tape, &format!("{prefix}.q"), xq)?;
        let mut k = self.linear(tape, &format!("{prefix}.k"), xkv)?;
        let mut v = self.linear(tape, &format!("{prefix}.v"), xkv)?;
        if let Some(idx) = kv_index {
            k = tape.gather_rows(k, idx)?;
            v = tape.gather_rows(v, idx)?;
        }
        let o = tape.attention(q, k, v, self.cfg.heads, mask)?;
        self.linear(tape, &format!("{prefix}.o"), o)
    }

    fn encoder_block<T: Float>(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        x: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var, EncoderError> {
        let h = self.norm(tape, &format!("{prefix}.ln1"), x)?;
        let a = self.attend(tape, &format!("{prefix}.attn"), h, h, None, mask)?;
        let x = tape.add(x, a)?;
        let h = self.norm(tape, &format!("{prefix}.ln2"), x)?;
        let m = self.mlp(tape, &format!("{prefix}.mlp"), h)?;
        Ok(tape.add(x, m)?)
    }

    fn finish<T: Float>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<EncoderOutput, EncoderError> {
        let seq = self.norm(tape, &format!("{prefix}.ln_f"), x)?;
        let cls = tape.select_token(seq, 0)?;
        Ok(EncoderOutput { seq, cls })
    }

    /// Patch embedding, learned positions and a [CLS] token followed by
    /// pre-norm self-attention blocks. Output length is `1 + patches`.
    pub fn encode_images<T: Float>(&self, tape: &mut Tape<T>, images: &[&Image]) -> Result<EncoderOutput, EncoderError> {
        let cfg = self.cfg;
        let mut data = Vec::with_capacity(images.len() * cfg.image_size * cfg.image_size * 3);
        for img in images {
            if img.height() != cfg.image_size || img.width() != cfg.image_size {
                return Err(EncoderError::Image(format!(
                    "encoder expects {s}x{s} images, got {}x{}",
                    img.height(),
                    img.width(),
                    s = cfg.image_size
                )));
            }
            data.extend(img.patchify(cfg.patch)?.into_iter().map(|v| T::c(v as f64)));
        }
        let patches = cfg.num_patches();
        let patch_dim = cfg.patch * cfg.patch * 3;
        let x = tape.constant(Tensor::new(vec![images.len(), patches, patch_dim], data)?);
        let x = self.linear(tape, "vision.patch", x)?;
        let x = tape.prepend_row(x, self.p("vision.cls"))?;
        let mut x = tape.add_broadcast(x, self.p("vision.pos"))?;
        for l in 0..cfg.layers {
            x = self.encoder_block(tape, &format!("vision.blocks.{l}"), x, None)?;
        }
        self.finish(tape, "vision", x)
    }

    /// Token embedding plus positions, then bidirectional self-attention with
    /// padded positions masked out as keys. All sequences must share a length.
    pub fn encode_text<T: Float>(&self, tape: &mut Tape<T>, seqs: &[&TokenSeq]) -> Result<TextOutput, EncoderError> {
        let len = seqs.first().map(|s| s.len()).ok_or_else(|| EncoderError::Params("empty text batch".into()))?;
        if len > self.cfg.text_len {
            return Err(EncoderError::Params(format!(
                "sequence length {len} exceeds position table {}",
                self.cfg.text_len
            )));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if s.len() != len {
                return Err(EncoderError::Params(format!("mixed sequence lengths {} and {len}", s.len())));
            }
            if let Some(&bad) = s.ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
                return Err(EncoderError::Vocab(format!("token id {bad} outside vocabulary")));
            }
            ids.extend(s.ids.iter().map(|&i| i as usize));
            mask.extend_from_slice(&s.mask);
        }
        let d = self.cfg.width;
        let x = tape.gather_rows(self.p("text.tok"), &ids)?;
        let x = tape.reshape(x, &[seqs.len(), len, d])?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(self.p("text.pos"), &positions)?;
        let mut x = tape.add_broadcast(x, pos)?;
        for l in 0..self.cfg.layers {
            x = self.encoder_block(tape, &format!("text.blocks.{l}"), x, Some(&mask))?;
        }
        let out = self.finish(tape, "text", x)?;
        Ok(TextOutput { out, mask, len })
    }

    /// Fuses pairs `(vision[v_idx[p]], text[t_idx[p]])`. Text positions act as
    /// queries: each block applies text self-attention, cross-attention over
    /// the vision sequence, and a feed-forward layer. The returned `cls` is the
    /// fused text [CLS] row.
    pub fn fuse<T: Float>(
        &self,
        tape: &mut Tape<T>,
        vision: &EncoderOutput,
        v_idx: &[usize],
        text: &TextOutput,
        t_idx: &[usize],
    ) -> Result<EncoderOutput, EncoderError> {
        if v_idx.len() != t_idx.len() {
            return Err(EncoderError::Params(format!(
                "fuse: {} vision indices for {} text indices",
                v_idx.len(),
                t_idx.len()
            )));
        }
        let (vs, ts) = (tape.shape(vision.seq).to_vec(), tape.shape(text.out.seq).to_vec());
        if vs.len() != 3 || ts.len() != 3 || vs[2] != ts[2] || vs[2] != self.cfg.width {
            return Err(EncoderError::Diff(crate::diffcore::DiffError::shape("fuse", &[&vs, &ts])));
        }
        let len = text.len;
        let mut mask = Vec::with_capacity(t_idx.len() * len);
        for &t in t_idx {
            mask.extend_from_slice(&text.mask[t * len..(t + 1) * len]);
        }
        let mut x = tape.gather_rows(text.out.seq, t_idx)?;
        for l in 0..self.cfg.fusion_layers {
            let p = format!("fusion.blocks.{l}");
            let h = self.norm(tape, &format!("{p}.ln_self"), x)?;
            let a = self.attend(tape, &format!("{p}.self_attn"), h, h, None, Some(&mask))?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, &format!("{p}.ln_cross"), x)?;
            let kv = self.norm(tape, &format!("{p}.ln_kv"), vision.seq)?;
            let c = self.attend(tape, &format!("{p}.cross_attn"), h, kv, Some(v_idx), None)?;
            x = tape.add(x, c)?;
            let h = self.norm(tape, &format!("{p}.ln_mlp"), x)?;
            let m = self.mlp(tape, &format!("{p}.mlp"), h)?;
            x = tape.add(x, m)?;
        }
        self.finish(tape, "fusion", x)
    }

    /// Bias-free linear projection to the embedding width, L2-normalised.
    pub fn project<T: Float>(&self, tape: &mut Tape<T>, cls: Var, modality: Modality) -> Result<Var, EncoderError> {
        let name = match modality {
            Modality::Vision => "proj_v",
            Modality::Text => "proj_t",
        };
        let z = self.linear(tape, name, cls)?;
        Ok(tape.l2_normalize(z)?)
    }

    /// Two logits per fused [CLS]: index 1 is "matched".
    pub fn match_head<T: Float>(&self, tape: &mut Tape<T>, fused_cls: Var) -> Result<Var, EncoderError> {
        self.linear(tape, "match_head", fused_cls)
    }

    /// `(cx, cy, w, h)` per fused [CLS], each squashed into `[0, 1]`.
    pub fn box_head<T: Float>(&self, tape: &mut Tape<T>, fused_cls: Var) -> Result<Var, EncoderError> {
        let raw = self.linear(tape, "box_head", fused_cls)?;
        Ok(tape.sigmoid(raw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{ParamStore, Vocab};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(size, size, (0..size * size * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    fn setup(cfg: &ModelConfig, seed: u64) -> (Tape<f64>, Bound) {
        let params = ParamStore::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        (tape, bound)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn image_sequence_length_and_cls_row() {
        let cfg = ModelConfig::default();
        let (mut tape, bound) = setup(&cfg, 1);
        let enc = Encoders::new(&cfg, &bound);
        let img = random_image(64, 2);
        let out = enc.encode_images(&mut tape, &[&img, &img]).unwrap();
        assert_eq!(tape.shape(out.seq), &[2, 65, 64]);
        let seq = tape.data(out.seq).to_vec();
        let cls = tape.data(out.cls);
        assert_eq!(&cls[..64], &seq[..64]);
        assert_eq!(&cls[..64], &cls[64..]);
        assert!(matches!(enc.encode_images(&mut tape, &[&random_image(60, 0)]), Err(EncoderError::Image(_))));
    }

    #[test]
    fn padding_does_not_change_text_outputs() {
        let cfg = ModelConfig::default();
        let (mut tape, bound) = setup(&cfg, 3);
        let enc = Encoders::new(&cfg, &bound);
        let v = Vocab::builtin();
        let short = v.tokenize("a red circle near a blue square", 10).unwrap();
        let long = short.repadded(24);
        let a = enc.encode_text(&mut tape, &[&short]).unwrap();
        let b = enc.encode_text(&mut tape, &[&long]).unwrap();
        let real = short.real_len() * cfg.width;
        assert!(close(&tape.data(a.out.seq)[..real], &tape.data(b.out.seq)[..real], 1e-9));

        let only_cls = v.tokenize("red", 1).unwrap().repadded(6);
        let c = enc.encode_text(&mut tape, &[&only_cls]).unwrap();
        assert!(tape.data(c.out.cls).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zeroed_cross_attention_makes_fusion_vision_independent() {
        let cfg = ModelConfig::default();
        let mut params = ParamStore::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        for l in 0..cfg.fusion_layers {
            for part in ["w", "b"] {
                let t = params.get_mut(&format!("fusion.blocks.{l}.cross_attn.o.{part}")).unwrap();
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let enc = Encoders::new(&cfg, &bound);
        let text = Vocab::builtin().tokenize("a small green cross", 8).unwrap();
        let t = enc.encode_text(&mut tape, &[&text]).unwrap();
        let (i1, i2) = (random_image(64, 10), random_image(64, 11));
        let v = enc.encode_images(&mut tape, &[&i1, &i2]).unwrap();
        let f = enc.fuse(&mut tape, &v, &[0, 1], &t, &[0, 0]).unwrap();
        let cls = tape.data(f.cls);
        assert!(close(&cls[..64], &cls[64..], 1e-12));
    }

    #[test]
    fn fusion_is_sensitive_to_vision() {
        let cfg = ModelConfig::default();
        for seed in 0..20 {
            let (mut tape, bound) = setup(&cfg, seed);
            let enc = Encoders::new(&cfg, &bound);
            let text = Vocab::builtin().tokenize("a large red square", 8).unwrap();
            let t = enc.encode_text(&mut tape, &[&text]).unwrap();
            let (i1, i2) = (random_image(64, 100 + seed), random_image(64, 200 + seed));
            let v = enc.encode_images(&mut tape, &[&i1, &i2]).unwrap();
            let f = enc.fuse(&mut tape, &v, &[0, 1, 0], &t, &[0, 0, 0]).unwrap();
            let cls = tape.data(f.cls);
            assert!(!close(&cls[..64], &cls[64..128], 1e-9), "seed {seed}");
            assert_eq!(&cls[..64], &cls[128..]);
        }
    }

    #[test]
    fn projection_contracts() {
        let cfg = ModelConfig { width: 4, heads: 1, embed_dim: 4, ..ModelConfig::default() };
        let mut params = ParamStore::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        params.insert("proj_v.w", Tensor::identity(4));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let enc = Encoders::new(&cfg, &bound);
        let x = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0, 0.0, 0.0], vec![30.0, 40.0, 0.0, 0.0]]).unwrap());
        let z = enc.project(&mut tape, x, Modality::Vision).unwrap();
        assert!(close(tape.data(z), &[0.6, 0.8, 0.0, 0.0, 0.6, 0.8, 0.0, 0.0], 1e-12));
        let zt = enc.project(&mut tape, x, Modality::Text).unwrap();
        let zt = tape.data(zt);
        assert!(close(&zt[..4], &zt[4..], 1e-12));
        assert!((zt[..4].iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_box_head_predicts_centered_half_box() {
        let cfg = ModelConfig::default();
        let mut params = ParamStore::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        params.insert("box_head.w", Tensor::zeros(&[64, 4]));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let enc = Encoders::new(&cfg, &bound);
        let x = tape.constant(Tensor::full(&[3, 64], 7.0));
        let b = enc.box_head(&mut tape, x).unwrap();
        assert!(tape.data(b).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_positions_make_patches_equivariant() {
        let cfg = ModelConfig { image_size: 16, ..ModelConfig::default() };
        let mut params = ParamStore::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        params.insert("vision.pos", Tensor::zeros(&[5, 64]));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let enc = Encoders::new(&cfg, &bound);
        let img = random_image(16, 9);
        // swap the top-left and top-right 8x8 patches
        let mut swapped = img.clone();
        for y in 0..8 {
            for x in 0..8 {
                swapped.set_rgb(y, x, img.rgb(y, x + 8));
                swapped.set_rgb(y, x + 8, img.rgb(y, x));
            }
        }
        let out = enc.encode_images(&mut tape, &[&img, &swapped]).unwrap();
        let s = tape.data(out.seq);
        let row = |b: usize, r: usize| &s[(b * 5 + r) * 64..(b * 5 + r + 1) * 64];
        assert!(close(row(0, 0), row(1, 0), 1e-10));
        assert!(close(row(0, 1), row(1, 2), 1e-10));
        assert!(close(row(0, 2), row(1, 1), 1e-10));
        assert!(close(row(0, 3), row(1, 3), 1e-10));
    }
}
