//! Scene grammar: objects, region clusters, fragments and global captions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::encoders::{Image, RegionBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circles",
            ShapeKind::Square => "squares",
            ShapeKind::Triangle => "triangles",
            ShapeKind::Cross => "crosses",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Cyan];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.90, 0.10, 0.10],
            Color::Green => [0.10, 0.75, 0.20],
            Color::Blue => [0.15, 0.25, 0.95],
            Color::Yellow => [0.95, 0.90, 0.10],
            Color::Purple => [0.60, 0.20, 0.80],
            Color::Cyan => [0.10, 0.85, 0.90],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Side length in grid cells.
    pub fn cells(self) -> usize {
        match self {
            Size::Small => 1,
            Size::Large => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    Above,
    Near,
    SurroundedBy,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::Above, Relation::Near, Relation::SurroundedBy];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::Above => "above",
            Relation::Near => "near",
            Relation::SurroundedBy => "surrounded by",
        }
    }
}

/// One rendered object; `row`, `col` are the top-left grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    pub size: Size,
    pub row: usize,
    pub col: usize,
}

/// A region: its box, its caption fragment and the objects it covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: RegionBox,
    pub fragment: String,
    pub relation: Relation,
    pub objects: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Heldout,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Heldout];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Heldout => "heldout",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One sample: image, global caption and its region annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    pub split: Split,
    pub global_caption: String,
    pub regions: Vec<Region>,
    pub objects: Vec<SceneObject>,
    pub texture_seed: u64,
    pub image: Image,
}

/// An (anchor colour, relation) pair kept out of every split except `heldout`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Combo {
    pub color: Color,
    pub relation: Relation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub heldout: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { train: 2000, val: 200, test: 200, heldout: 200 }
    }
}

impl SplitSizes {
    pub fn get(&self, s: Split) -> usize {
        match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
            Split::Heldout => self.heldout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub image_size: usize,
    pub grid: usize,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<Color>,
    pub sizes: Vec<Size>,
    pub relations: Vec<Relation>,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Per-fragment probability that a training scene's global caption drops
    /// or blurs it. The other splits always get complete captions.
    pub ambiguity: f64,
    pub heldout_combos: Vec<Combo>,
    pub splits: SplitSizes,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            grid: 8,
            shapes: ShapeKind::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            sizes: vec![Size::Small, Size::Large],
            relations: Relation::ALL.to_vec(),
            min_regions: 2,
            max_regions: 3,
            ambiguity: 0.3,
            heldout_combos: vec![
                Combo { color: Color::Purple, relation: Relation::Above },
                Combo { color: Color::Cyan, relation: Relation::LeftOf },
                Combo { color: Color::Yellow, relation: Relation::SurroundedBy },
            ],
            splits: SplitSizes::default(),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return bad(format!("ambiguity {} must lie in [0, 1]", self.ambiguity));
        }
        if self.shapes.is_empty() || self.colors.len() < 2 || self.sizes.is_empty() || self.relations.is_empty() {
            return bad("object and relation vocabularies must be non-empty (at least two colours)".into());
        }
        if self.grid < 4 || self.image_size % self.grid != 0 || self.image_size / self.grid < 4 {
            return bad(format!("image size {} must split into a grid of {} cells of at least 4 px", self.image_size, self.grid));
        }
        if self.min_regions < 2 || self.max_regions > 8 || self.min_regions > self.max_regions {
            return bad(format!("regions per scene {}..={} must lie within 2..=8", self.min_regions, self.max_regions));
        }
        for c in &self.heldout_combos {
            if !self.colors.contains(&c.color) || !self.relations.contains(&c.relation) {
                return bad(format!("held-out combination {c:?} uses words outside the vocabulary"));
            }
        }
        let allowed = self.colors.len() * self.relations.len() - self.heldout_combos.len();
        if allowed == 0 {
            return bad("every colour-relation combination is held out".into());
        }
        Ok(())
    }

    fn is_heldout(&self, color: Color, relation: Relation) -> bool {
        self.heldout_combos.iter().any(|c| c.color == color && c.relation == relation)
    }
}

/// SplitMix64 finaliser, used to derive independent per-scene seeds.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Relative cell placements of one cluster: objects and footprint (rows, cols).
struct Cluster {
    objects: Vec<(ShapeKind, Color, Size, usize, usize)>,
    rows: usize,
    cols: usize,
    fragment: String,
    relation: Relation,
}

fn phrase(size: Size, color: Color, shape: ShapeKind) -> String {
    format!("a {} {} {}", size.word(), color.word(), shape.word())
}

fn sample_cluster<R: Rng>(cfg: &GenConfig, rng: &mut R, forced: Option<Combo>, split: Split) -> Cluster {
    let pick_color = |rng: &mut R| *cfg.colors.choose(rng).expect("validated");
    let (anchor_color, relation) = match forced {
        Some(c) => (c.color, c.relation),
        None => loop {
            let c = pick_color(rng);
            let r = *cfg.relations.choose(rng).expect("validated");
            if split == Split::Heldout || !cfg.is_heldout(c, r) {
                break (c, r);
            }
        },
    };
    let shape_a = *cfg.shapes.choose(rng).expect("validated");
    let shape_b = *cfg.shapes.choose(rng).expect("validated");
    let color_b = loop {
        let c = pick_color(rng);
        if c != anchor_color {
            break c;
        }
    };
    if relation == Relation::SurroundedBy {
        let mut objects = vec![(shape_a, anchor_color, Size::Small, 1, 1)];
        for (r, c) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            objects.push((shape_b, color_b, Size::Small, r, c));
        }
        let fragment = format!(
            "{} surrounded by {} {}",
            phrase(Size::Small, anchor_color, shape_a),
            color_b.word(),
            shape_b.plural()
        );
        return Cluster { objects, rows: 3, cols: 3, fragment, relation };
    }
    let size_a = *cfg.sizes.choose(rng).expect("validated");
    let size_b = *cfg.sizes.choose(rng).expect("validated");
    let (ca, cb) = (size_a.cells(), size_b.cells());
    let (pos_b, rows, cols) = match relation {
        Relation::LeftOf => ((0, ca), ca.max(cb), ca + cb),
        Relation::Above => ((ca, 0), ca + cb, ca.max(cb)),
        _ => ((ca, ca), ca + cb, ca + cb),
    };
    let objects = vec![(shape_a, anchor_color, size_a, 0, 0), (shape_b, color_b, size_b, pos_b.0, pos_b.1)];
    let fragment = format!(
        "{} {} {}",
        phrase(size_a, anchor_color, shape_a),
        relation.phrase(),
        phrase(size_b, color_b, shape_b)
    );
    Cluster { objects, rows, cols, fragment, relation }
}

/// Caption over the region fragments, blurred per fragment with probability
/// `ambiguity`: the fragment is either dropped or one attribute is replaced by
/// a generic word.
fn global_caption<R: Rng>(fragments: &[String], clusters: &[Cluster], ambiguity: f64, rng: &mut R) -> String {
    let mut kept = Vec::new();
    for (frag, cl) in fragments.iter().zip(clusters) {
        if rng.gen::<f64>() >= ambiguity {
            kept.push(frag.clone());
            continue;
        }
        if rng.gen_bool(0.5) {
            continue;
        }
        let (shape, color, _, _, _) = cl.objects[0];
        let blurred = if rng.gen_bool(0.5) {
            frag.replacen(&format!("{} {}", color.word(), shape.word()), &format!("colored {}", shape.word()), 1)
        } else {
            frag.replacen(&format!("{} {}", color.word(), shape.word()), &format!("{} shape", color.word()), 1)
        };
        kept.push(blurred);
    }
    match kept.len() {
        0 => "a scene with shapes".to_string(),
        1 => kept[0].clone(),
        n => format!("{} and {}", kept[..n - 1].join(", "), kept[n - 1]),
    }
}

/// Places `min_regions..=max_regions` non-overlapping clusters on the grid and
/// renders the scene. `seed` fully determines the result.
pub fn generate_scene(cfg: &GenConfig, split: Split, index: usize, seed: u64) -> Result<SceneRecord, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_regions = rng.gen_range(cfg.min_regions..=cfg.max_regions);
    let cell = cfg.image_size / cfg.grid;
    let g = cfg.grid;

    for _attempt in 0..100 {
        let mut occupied = vec![false; g * g];
        let mut clusters = Vec::with_capacity(n_regions);
        let mut origins = Vec::with_capacity(n_regions);
        let mut ok = true;
        for k in 0..n_regions {
            let forced = if split == Split::Heldout && k == 0 {
                cfg.heldout_combos.choose(&mut rng).copied()
            } else {
                None
            };
            let cl = sample_cluster(cfg, &mut rng, forced, split);
            if cl.rows > g || cl.cols > g {
                ok = false;
                break;
            }
            let mut placed = None;
            for _ in 0..50 {
                let r0 = rng.gen_range(0..=g - cl.rows);
                let c0 = rng.gen_range(0..=g - cl.cols);
                let free = (r0..r0 + cl.rows).all(|r| (c0..c0 + cl.cols).all(|c| !occupied[r * g + c]));
                if free {
                    placed = Some((r0, c0));
                    break;
                }
            }
            let Some((r0, c0)) = placed else {
                ok = false;
                break;
            };
            for r in r0..r0 + cl.rows {
                for c in c0..c0 + cl.cols {
                    occupied[r * g + c] = true;
                }
            }
            clusters.push(cl);
            origins.push((r0, c0));
        }
        if !ok {
            continue;
        }

        let mut objects = Vec::new();
        let mut regions = Vec::with_capacity(n_regions);
        for (cl, &(r0, c0)) in clusters.iter().zip(&origins) {
            let first = objects.len();
            for &(shape, color, size, r, c) in &cl.objects {
                objects.push(SceneObject { shape, color, size, row: r0 + r, col: c0 + c });
            }
            let gf = g as f64;
            let bbox = RegionBox::from_corners(
                c0 as f64 / gf,
                r0 as f64 / gf,
                (c0 + cl.cols) as f64 / gf,
                (r0 + cl.rows) as f64 / gf,
            )
            .map_err(DataError::Encoder)?;
            regions.push(Region {
                bbox,
                fragment: cl.fragment.clone(),
                relation: cl.relation,
                objects: (first..objects.len()).collect(),
            });
        }
        let fragments: Vec<String> = regions.iter().map(|r| r.fragment.clone()).collect();
        let ambiguity = if split == Split::Train { cfg.ambiguity } else { 0.0 };
        let caption = global_caption(&fragments, &clusters, ambiguity, &mut rng);
        let texture_seed = rng.gen();
        let mut rec = SceneRecord {
            scene_id: format!("{}-{index:05}", split.name()),
            split,
            global_caption: caption,
            regions,
            objects,
            texture_seed,
            image: Image::filled(1, 1, [0.0; 3]),
        };
        rec.image = super::render(&rec, cfg.image_size, cell);
        return Ok(rec);
    }
    Err(DataError::Placement { seed, regions: n_regions })
}

/// Every split of the configured sizes, each scene from its own derived seed.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<SceneRecord>, DataError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (tag, split) in Split::ALL.into_iter().enumerate() {
        for i in 0..cfg.splits.get(split) {
            out.push(generate_scene(cfg, split, i, derive_seed(cfg.seed, tag as u64 + 1, i as u64))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{Vocab, UNK_ID};

    #[test]
    fn clear_captions_contain_every_fragment() {
        let cfg = GenConfig { ambiguity: 0.0, ..GenConfig::default() };
        for i in 0..50 {
            let s = generate_scene(&cfg, Split::Train, i, derive_seed(1, 1, i as u64)).unwrap();
            assert!(s.regions.len() >= 2 && s.regions.len() <= 3);
            for r in &s.regions {
                assert!(s.global_caption.contains(&r.fragment), "{} / {}", s.global_caption, r.fragment);
            }
        }
    }

    #[test]
    fn evaluation_splits_keep_complete_captions() {
        let cfg = GenConfig { ambiguity: 1.0, ..GenConfig::default() };
        for split in [Split::Val, Split::Test, Split::Heldout] {
            let s = generate_scene(&cfg, split, 0, derive_seed(5, 1, 0)).unwrap();
            assert!(s.regions.iter().all(|r| s.global_caption.contains(&r.fragment)), "{}", s.global_caption);
        }
    }

    #[test]
    fn full_ambiguity_blurs_every_fragment() {
        let cfg = GenConfig { ambiguity: 1.0, ..GenConfig::default() };
        for i in 0..50 {
            let s = generate_scene(&cfg, Split::Train, i, derive_seed(2, 1, i as u64)).unwrap();
            for r in &s.regions {
                assert!(!s.global_caption.contains(&r.fragment));
                assert!(r.fragment.starts_with("a small") || r.fragment.starts_with("a large"));
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = GenConfig::default();
        assert_eq!(generate_scene(&cfg, Split::Val, 3, 99).unwrap(), generate_scene(&cfg, Split::Val, 3, 99).unwrap());
    }

    #[test]
    fn captions_fit_and_use_known_words() {
        let cfg = GenConfig::default();
        let v = Vocab::builtin();
        for i in 0..200 {
            let s = generate_scene(&cfg, Split::Train, i, derive_seed(3, 1, i as u64)).unwrap();
            let g = v.tokenize(&s.global_caption, 64).unwrap();
            assert!(g.real_len() <= 32, "{}", s.global_caption);
            assert!(!g.ids.contains(&UNK_ID));
            for r in &s.regions {
                let t = v.tokenize(&r.fragment, 16).unwrap();
                assert!(t.real_len() <= 16 && !t.ids.contains(&UNK_ID));
                r.bbox.validate().unwrap();
            }
        }
    }

    #[test]
    fn heldout_combos_stay_in_heldout() {
        let cfg = GenConfig::default();
        let held = |s: &SceneRecord| {
            s.regions.iter().any(|r| cfg.is_heldout(s.objects[r.objects[0]].color, r.relation))
        };
        for i in 0..100 {
            assert!(!held(&generate_scene(&cfg, Split::Train, i, derive_seed(4, 1, i as u64)).unwrap()));
            assert!(held(&generate_scene(&cfg, Split::Heldout, i, derive_seed(4, 4, i as u64)).unwrap()));
        }
    }

    #[test]
    fn bad_ambiguity_rejected() {
        let cfg = GenConfig { ambiguity: 1.5, ..GenConfig::default() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("ambiguity"));
    }
}
