//! Synthetic shape scenes: bright geometric objects on noisy dark backgrounds.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance, Sample};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ScoredBox};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Disc,
    Triangle,
    Cross,
    Ring,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Square,
        Shape::Disc,
        Shape::Triangle,
        Shape::Cross,
        Shape::Ring,
        Shape::Bar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disc => "disc",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Bar => "bar",
        }
    }

    pub fn from_name(name: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Whether the pixel at normalised position `(u, v)` in `[0, 1)^2` of
    /// the bounding box is part of the shape.
    fn covers(self, u: f64, v: f64) -> bool {
        let (dx, dy) = (u - 0.5, v - 0.5);
        let r2 = dx * dx + dy * dy;
        match self {
            Shape::Square => true,
            Shape::Disc => r2 <= 0.25,
            Shape::Triangle => (u - 0.5).abs() <= 0.5 * v,
            Shape::Cross => dx.abs() <= 0.17 || dy.abs() <= 0.17,
            Shape::Ring => (0.09..=0.25).contains(&r2),
            Shape::Bar => dy.abs() <= 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Largest height / width ratio (and its inverse) of an object.
    pub max_aspect: f64,
    /// Background noise is uniform in `[0, background_max]`.
    pub background_max: f64,
    /// Object brightness is uniform in `[object_min, 1]`.
    pub object_min: f64,
    /// Probability of one extra object of another class in a scene.
    pub extra_object_prob: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 48,
            height: 48,
            min_size: 12,
            max_size: 24,
            max_aspect: 1.25,
            background_max: 0.35,
            object_min: 0.65,
            extra_object_prob: 0.5,
        }
    }
}

/// One rendered image and every object in it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor3,
    pub objects: Vec<(Shape, BBox)>,
}

fn place(rng: &mut impl Rng, cfg: &SceneConfig, taken: &[BBox]) -> Option<BBox> {
    for _ in 0..50 {
        let w = rng.gen_range(cfg.min_size..=cfg.max_size);
        let aspect = rng.gen_range(1.0 / cfg.max_aspect..=cfg.max_aspect);
        let h = ((w as f64 * aspect).round() as usize).clamp(cfg.min_size, cfg.max_size);
        if w > cfg.width || h > cfg.height {
            return None;
        }
        let x = rng.gen_range(0..=cfg.width - w) as f64;
        let y = rng.gen_range(0..=cfg.height - h) as f64;
        let b = BBox {
            x_min: x,
            y_min: y,
            x_max: x + w as f64,
            y_max: y + h as f64,
        };
        if taken.iter().all(|t| t.intersection_area(&b) == 0.0) {
            return Some(b);
        }
    }
    None
}

/// Renders `shapes` at random non-overlapping positions; shapes that do not
/// fit are skipped.
pub fn render_scene(rng: &mut impl Rng, cfg: &SceneConfig, shapes: &[Shape]) -> Scene {
    let (w, h) = (cfg.width, cfg.height);
    let mut data: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>() * cfg.background_max).collect();
    let mut objects: Vec<(Shape, BBox)> = Vec::new();
    for &shape in shapes {
        let taken: Vec<BBox> = objects.iter().map(|o| o.1).collect();
        let Some(b) = place(rng, cfg, &taken) else { continue };
        let level = rng.gen_range(cfg.object_min..=1.0);
        for y in b.y_min as usize..b.y_max as usize {
            for x in b.x_min as usize..b.x_max as usize {
                let u = (x as f64 + 0.5 - b.x_min) / b.width();
                let v = (y as f64 + 0.5 - b.y_min) / b.height();
                if shape.covers(u, v) {
                    data[y * w + x] = level;
                }
            }
        }
        objects.push((shape, b));
    }
    Scene {
        image: Tensor3::from_vec(1, h, w, data).expect("sized buffer"),
        objects,
    }
}

/// Scenes grouped by the class they were drawn for.
#[derive(Debug, Clone)]
pub struct ShapeCorpus {
    pub shapes: Vec<Shape>,
    /// `(primary shape, scene)`; the primary object is always present.
    pub scenes: Vec<(Shape, Scene)>,
}

impl ShapeCorpus {
    /// `per_class` scenes for every shape. Each scene holds its primary shape
    /// and, with `extra_object_prob`, one other shape from `shapes`.
    pub fn generate(shapes: &[Shape], per_class: usize, cfg: &SceneConfig, seed: u64) -> ShapeCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scenes = Vec::with_capacity(shapes.len() * per_class);
        for &primary in shapes {
            for _ in 0..per_class {
                let mut content = vec![primary];
                if shapes.len() > 1 && rng.gen_bool(cfg.extra_object_prob) {
                    let others: Vec<Shape> = shapes.iter().copied().filter(|&s| s != primary).collect();
                    content.push(*others.choose(&mut rng).expect("non-empty"));
                }
                scenes.push((primary, render_scene(&mut rng, cfg, &content)));
            }
        }
        ShapeCorpus {
            shapes: shapes.to_vec(),
            scenes,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.shapes.iter().map(|s| s.name().to_string()).collect()
    }

    /// Scenes drawn for any of `primary`, annotated only with objects of
    /// `annotate`; unannotated objects stay in the pixels as background.
    pub fn dataset(&self, primary: &[Shape], annotate: &[Shape], id_prefix: &str) -> Dataset {
        let classes = self.class_names();
        let samples = self
            .scenes
            .iter()
            .enumerate()
            .filter(|(_, (p, _))| primary.contains(p))
            .map(|(i, (_, scene))| Sample {
                id: format!("{id_prefix}{i:05}"),
                image: Arc::new(scene.image.clone()),
                boxes: scene
                    .objects
                    .iter()
                    .filter(|(s, _)| annotate.contains(s))
                    .map(|(s, b)| {
                        let class = self.shapes.iter().position(|x| x == s).expect("corpus shape");
                        ScoredBox::ground_truth(*b, class)
                    })
                    .collect(),
                provenance: Provenance::New,
            })
            .filter(|s: &Sample| !s.boxes.is_empty())
            .collect();
        Dataset { classes, samples }
    }

    /// Every scene with every object annotated.
    pub fn full_dataset(&self, id_prefix: &str) -> Dataset {
        self.dataset(&self.shapes, &self.shapes, id_prefix)
    }
}

fn to_gray(image: &Tensor3) -> Result<image::GrayImage> {
    if image.channels != 1 {
        return Err(Error::Shape("only single-channel images can be written".into()));
    }
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(image.width as u32, image.height as u32, bytes)
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))
}

fn from_gray(img: image::GrayImage) -> Result<Tensor3> {
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Tensor3::from_vec(1, h as usize, w as usize, data)
}

/// Writes a single-channel image in `[0, 1]` as an 8-bit PNG.
pub fn save_png(image: &Tensor3, path: &Path) -> Result<()> {
    to_gray(image)?.save(path)?;
    Ok(())
}

/// Reads any PNG as a single-channel image in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor3> {
    from_gray(image::open(path)?.to_luma8())
}

pub fn encode_png(image: &Tensor3) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_gray(image)?.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor3> {
    from_gray(image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_luma8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_in_bounds() {
        let cfg = SceneConfig::default();
        let a = ShapeCorpus::generate(&Shape::ALL[..4], 5, &cfg, 3);
        let b = ShapeCorpus::generate(&Shape::ALL[..4], 5, &cfg, 3);
        assert_eq!(a.scenes.len(), 20);
        for ((pa, sa), (pb, sb)) in a.scenes.iter().zip(&b.scenes) {
            assert_eq!(pa, pb);
            assert_eq!(sa, sb);
            assert_eq!(sa.objects[0].0, *pa);
            for (_, o) in &sa.objects {
                assert!(o.x_min >= 0.0 && o.x_max <= 48.0 && o.y_min >= 0.0 && o.y_max <= 48.0);
                assert!((12.0..=24.0).contains(&o.width()));
            }
        }
    }

    #[test]
    fn partial_annotation_keeps_pixels() {
        let cfg = SceneConfig {
            extra_object_prob: 1.0,
            ..Default::default()
        };
        let corpus = ShapeCorpus::generate(&[Shape::Square, Shape::Disc], 4, &cfg, 1);
        let only_square = corpus.dataset(&[Shape::Square], &[Shape::Square], "s");
        assert_eq!(only_square.len(), 4);
        for s in &only_square.samples {
            assert_eq!(s.boxes.len(), 1);
            assert_eq!(s.boxes[0].class_id, 0);
        }
        assert_eq!(corpus.full_dataset("f").samples[0].boxes.len(), 2);
    }

    #[test]
    fn png_round_trip_quantises() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scene = render_scene(&mut rng, &SceneConfig::default(), &[Shape::Ring]);
        save_png(&scene.image, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert!(back.same_shape(&scene.image));
        for (a, b) in back.data.iter().zip(&scene.image.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let bytes = encode_png(&scene.image).unwrap();
        assert_eq!(decode_png(&bytes).unwrap(), back);
        assert_eq!(encode_png(&back).unwrap(), bytes);
    }
}
