//! Deterministic rasterisation of scene records.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SceneObject, SceneRecord, ShapeKind};
use crate::encoders::Image;

/// Whether pixel offset `(y, x)` inside a `side × side` box belongs to `shape`.
fn covers(shape: ShapeKind, side: usize, y: usize, x: usize) -> bool {
    let s = side as f64;
    let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
    match shape {
        ShapeKind::Square => true,
        ShapeKind::Circle => {
            let r = s / 2.0;
            (fy - r).powi(2) + (fx - r).powi(2) <= r * r
        }
        ShapeKind::Triangle => {
            // apex at the top centre, base along the bottom edge
            (fx - s / 2.0).abs() <= fy / 2.0
        }
        ShapeKind::Cross => {
            let (lo, hi) = (s / 3.0, 2.0 * s / 3.0);
            (fx >= lo && fx <= hi) || (fy >= lo && fy <= hi)
        }
    }
}

/// Pixel rectangle `(y0, x0, side)` an object is drawn into: its cells minus a
/// one-pixel margin.
pub fn object_pixels(obj: &SceneObject, cell: usize) -> (usize, usize, usize) {
    let side = obj.size.cells() * cell;
    (obj.row * cell + 1, obj.col * cell + 1, side - 2)
}

/// Low-contrast grey noise background with hard-edged shapes on top.
pub fn render(scene: &SceneRecord, image_size: usize, cell: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.texture_seed);
    let mut img = Image::filled(image_size, image_size, [0.0; 3]);
    for y in 0..image_size {
        for x in 0..image_size {
            let v = 0.38 + 0.08 * rng.gen::<f32>();
            img.set_rgb(y, x, [v, v, v]);
        }
    }
    for obj in &scene.objects {
        let (y0, x0, side) = object_pixels(obj, cell);
        let rgb = obj.color.rgb();
        for dy in 0..side {
            for dx in 0..side {
                if covers(obj.shape, side, dy, dx) && y0 + dy < image_size && x0 + dx < image_size {
                    img.set_rgb(y0 + dy, x0 + dx, rgb);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Color, Size, Split};

    fn scene(objects: Vec<SceneObject>) -> SceneRecord {
        SceneRecord {
            scene_id: "t".into(),
            split: Split::Train,
            global_caption: "a scene".into(),
            regions: vec![],
            objects,
            texture_seed: 5,
            image: Image::filled(1, 1, [0.0; 3]),
        }
    }

    #[test]
    fn centered_square_colors_the_center() {
        let sq = SceneObject { shape: ShapeKind::Square, color: Color::Blue, size: Size::Large, row: 3, col: 3 };
        let img = render(&scene(vec![sq]), 64, 8);
        assert_eq!(img.rgb(32, 32), Color::Blue.rgb());
        assert_eq!(img, render(&scene(vec![sq]), 64, 8));
    }

    #[test]
    fn every_shape_fills_a_good_part_of_its_box() {
        for shape in ShapeKind::ALL {
            let n = (0..14).flat_map(|y| (0..14).map(move |x| (y, x))).filter(|&(y, x)| covers(shape, 14, y, x)).count();
            assert!(n as f64 / 196.0 > 0.4, "{shape:?} covers {n}");
        }
    }
}
