//! Procedurally drawn sketch/photo pairs.
//!
//! A photo is a filled, colored shape on a light background; its sketch is
//! the black outline of the same geometry on white. Geometry (shape, size,
//! position, rotation) identifies an instance, color is an attribute that a
//! sketch cannot express. The bundled dataset under `fixtures/shapes` is
//! produced by [`write_shapes_fixture`].

use std::f32::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;

use super::manifest::{DatasetManifest, ExtraPhoto, PairEntry, Split, SCHEMA_VERSION};
use crate::error::Result;

pub const SHAPES: [&str; 8] = [
    "circle", "square", "triangle", "diamond", "pentagon", "hexagon", "star", "cross",
];

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [40, 80, 220]),
    ("yellow", [235, 205, 40]),
    ("purple", [140, 60, 190]),
    ("orange", [245, 140, 30]),
    ("cyan", [40, 200, 210]),
    ("pink", [240, 120, 180]),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub shape: usize,
    /// Circumradius as a fraction of the image side.
    pub size: f32,
    pub cx: f32,
    pub cy: f32,
    pub rotation: f32,
}

impl Geometry {
    /// Random geometry that stays inside the frame.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let size = rng.random_range(0.18..0.42);
        let margin = size * 0.9;
        Self {
            shape: rng.random_range(0..SHAPES.len()),
            size,
            cx: rng.random_range(margin..1.0 - margin),
            cy: rng.random_range(margin..1.0 - margin),
            rotation: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn polygon(&self, scale: f32) -> Vec<(f32, f32)> {
        let local: Vec<(f32, f32)> = match self.shape {
            1 => regular(4, PI / 4.0),
            2 => regular(3, -PI / 2.0),
            3 => regular(4, 0.0),
            4 => regular(5, -PI / 2.0),
            5 => regular(6, 0.0),
            6 => (0..10)
                .map(|i| {
                    let r = if i % 2 == 0 { 1.0 } else { 0.45 };
                    let a = -PI / 2.0 + i as f32 * PI / 5.0;
                    (r * a.cos(), r * a.sin())
                })
                .collect(),
            7 => {
                let (a, b) = (0.33, 0.95);
                vec![
                    (-a, -b),
                    (a, -b),
                    (a, -a),
                    (b, -a),
                    (b, a),
                    (a, a),
                    (a, b),
                    (-a, b),
                    (-a, a),
                    (-b, a),
                    (-b, -a),
                    (-a, -a),
                ]
            }
            _ => Vec::new(),
        };
        let (s, c) = self.rotation.sin_cos();
        local
            .into_iter()
            .map(|(x, y)| {
                let (x, y) = (x * scale * self.size, y * scale * self.size);
                (self.cx + x * c - y * s, self.cy + x * s + y * c)
            })
            .collect()
    }

    fn contains(&self, x: f32, y: f32, scale: f32) -> bool {
        if self.shape == 0 {
            let r = self.size * scale;
            return (x - self.cx).powi(2) + (y - self.cy).powi(2) <= r * r;
        }
        point_in_polygon(&self.polygon(scale), x, y)
    }
}

fn regular(n: usize, phase: f32) -> Vec<(f32, f32)> {
    (0..n)
        .map(|i| {
            let a = phase + i as f32 * 2.0 * PI / n as f32;
            (a.cos(), a.sin())
        })
        .collect()
}

fn point_in_polygon(poly: &[(f32, f32)], x: f32, y: f32) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

const SUPERSAMPLE: usize = 4;
const PHOTO_BACKGROUND: [f32; 3] = [236.0, 236.0, 232.0];

fn render(side: u32, mut shade: impl FnMut(f32, f32) -> [f32; 3]) -> RgbImage {
    let n = SUPERSAMPLE as f32;
    RgbImage::from_fn(side, side, |px, py| {
        let mut acc = [0f32; 3];
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = (px as f32 + (sx as f32 + 0.5) / n) / side as f32;
                let y = (py as f32 + (sy as f32 + 0.5) / n) / side as f32;
                let c = shade(x, y);
                for k in 0..3 {
                    acc[k] += c[k];
                }
            }
        }
        let s = (SUPERSAMPLE * SUPERSAMPLE) as f32;
        Rgb(acc.map(|v| (v / s).round().clamp(0.0, 255.0) as u8))
    })
}

/// Filled shape in `color` on a light background.
pub fn render_photo(geom: &Geometry, color: [u8; 3], side: u32) -> RgbImage {
    let fill = color.map(f32::from);
    render(side, |x, y| {
        if geom.contains(x, y, 1.0) {
            fill
        } else {
            PHOTO_BACKGROUND
        }
    })
}

/// Black outline of the shape on white.
pub fn render_sketch(geom: &Geometry, side: u32) -> RgbImage {
    let stroke = 1.6 / side as f32;
    let inner = (1.0 - stroke / geom.size).max(0.0);
    render(side, |x, y| {
        if geom.contains(x, y, 1.0) && !geom.contains(x, y, inner) {
            [0.0; 3]
        } else {
            [255.0; 3]
        }
    })
}

/// Caption fragments used by surrogate pretraining and fixture captions.
pub fn caption_vocabulary() -> Vec<String> {
    let mut words: Vec<String> = SHAPES.iter().map(|s| s.to_string()).collect();
    words.extend(COLORS.iter().map(|(c, _)| format!("with {c} color")));
    words.extend(
        [
            "a photo of a",
            "a sketch of a",
            "small",
            "large",
            "on the left",
            "on the right",
            "at the top",
            "at the bottom",
            "in the center",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    words
}

/// Caption for attribute text at query time.
pub fn color_caption(color: usize) -> String {
    format!("{} color", COLORS[color].0)
}

/// The 32 training geometries: each shape at four placements.
pub fn training_geometries() -> Vec<Geometry> {
    let placements = [
        (0.40, 0.50, 0.50, 0.0),
        (0.24, 0.30, 0.32, 0.5),
        (0.30, 0.64, 0.66, 1.2),
        (0.27, 0.34, 0.68, 2.1),
    ];
    let mut out = Vec::new();
    for (v, &(size, cx, cy, rot)) in placements.iter().enumerate() {
        for shape in 0..SHAPES.len() {
            out.push(Geometry {
                shape,
                size,
                cx,
                cy,
                rotation: rot + 0.15 * shape as f32 + 0.05 * v as f32,
            });
        }
    }
    out
}

/// Held-out geometries for the test split, one per shape.
pub fn test_geometries() -> Vec<Geometry> {
    (0..SHAPES.len())
        .map(|shape| Geometry {
            shape,
            size: 0.33,
            cx: 0.58,
            cy: 0.42,
            rotation: 0.8 + 0.2 * shape as f32,
        })
        .collect()
}

pub fn training_color(index: usize) -> usize {
    (index * 3 + index / SHAPES.len()) % COLORS.len()
}

pub const FIXTURE_SIDE: u32 = 32;

fn save(img: &RgbImage, root: &Path, rel: &str) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(&path)?;
    Ok(())
}

/// Writes the shapes fixture to `root`:
///
/// * `manifest.json`: 32 training pairs and 8 captioned test pairs.
/// * `ambiguous.json`: the 32 training sketches against a gallery holding
///   every training geometry in all eight colors, captioned with the true
///   color. Sketch alone cannot tell the color variants apart.
pub fn write_shapes_fixture(root: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    std::fs::create_dir_all(root)?;
    let side = FIXTURE_SIDE;
    let mut pairs = Vec::new();
    for (i, g) in training_geometries().iter().enumerate() {
        let color = training_color(i);
        let sketch = format!("sketches/train_{i:03}.png");
        let photo = format!("photos/train_{i:03}.png");
        save(&render_sketch(g, side), root, &sketch)?;
        save(&render_photo(g, COLORS[color].1, side), root, &photo)?;
        pairs.push(PairEntry {
            id: format!("train-{i:03}"),
            sketch,
            photo: photo.clone(),
            photo_id: Some(format!("photo-train-{i:03}")),
            // a few training captions exist but are never read by the trainer
            caption: (i % 8 == 0).then(|| color_caption(color)),
            class_label: Some(SHAPES[g.shape].to_string()),
            domain_label: None,
            objects: None,
            query_objects: None,
            split: Split::Train,
        });
    }
    for (i, g) in test_geometries().iter().enumerate() {
        let color = (i * 5 + 2) % COLORS.len();
        let sketch = format!("sketches/test_{i:03}.png");
        let photo = format!("photos/test_{i:03}.png");
        save(&render_sketch(g, side), root, &sketch)?;
        save(&render_photo(g, COLORS[color].1, side), root, &photo)?;
        pairs.push(PairEntry {
            id: format!("test-{i:03}"),
            sketch,
            photo,
            photo_id: Some(format!("photo-test-{i:03}")),
            caption: Some(color_caption(color)),
            class_label: Some(SHAPES[g.shape].to_string()),
            domain_label: None,
            objects: None,
            query_objects: None,
            split: Split::Test,
        });
    }
    let main = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        name: "shapes".to_string(),
        root: ".".into(),
        pairs,
        extra_photos: Vec::new(),
        gallery: None,
    };
    main.save(&root.join("manifest.json"))?;

    let mut amb_pairs = Vec::new();
    let mut extra = Vec::new();
    let mut gallery = Vec::new();
    for (i, g) in training_geometries().iter().enumerate() {
        let true_color = training_color(i);
        for (c, (name, rgb)) in COLORS.iter().enumerate() {
            let id = format!("variant-{i:03}-{name}");
            let rel = format!("variants/{i:03}_{name}.png");
            save(&render_photo(g, *rgb, side), root, &rel)?;
            gallery.push(id.clone());
            if c == true_color {
                amb_pairs.push(PairEntry {
                    id: format!("ambiguous-{i:03}"),
                    sketch: format!("sketches/train_{i:03}.png"),
                    photo: rel,
                    photo_id: Some(id),
                    caption: Some(color_caption(c)),
                    class_label: Some(SHAPES[g.shape].to_string()),
                    domain_label: None,
                    objects: None,
                    query_objects: None,
                    split: Split::Test,
                });
            } else {
                extra.push(ExtraPhoto {
                    id,
                    path: rel,
                    class_label: Some(SHAPES[g.shape].to_string()),
                    domain_label: None,
                    objects: None,
                });
            }
        }
    }
    let ambiguous = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        name: "shapes-ambiguous".to_string(),
        root: ".".into(),
        pairs: amb_pairs,
        extra_photos: extra,
        gallery: Some(gallery),
    };
    ambiguous.save(&root.join("ambiguous.json"))?;
    Ok((main, ambiguous))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sketch_is_outline_and_photo_is_filled() {
        let g = training_geometries()[0];
        let photo = render_photo(&g, COLORS[0].1, 32);
        let sketch = render_sketch(&g, 32);
        // center of a large centered circle
        assert_eq!(photo.get_pixel(16, 16).0, COLORS[0].1);
        assert_eq!(sketch.get_pixel(16, 16).0, [255, 255, 255]);
        let dark = sketch.pixels().filter(|p| p.0[0] < 128).count();
        assert!(dark > 20 && dark < 300, "{dark} stroke pixels");
    }

    #[test]
    fn training_geometries_are_distinct() {
        let geoms = training_geometries();
        assert_eq!(geoms.len(), 32);
        let sketches: Vec<Vec<u8>> = geoms
            .iter()
            .map(|g| render_sketch(g, 32).into_raw())
            .collect();
        for i in 0..sketches.len() {
            for j in i + 1..sketches.len() {
                assert_ne!(sketches[i], sketches[j], "{i} vs {j}");
            }
        }
    }

    #[test]
    fn every_shape_renders_inside_the_frame() {
        for shape in 0..SHAPES.len() {
            let g = Geometry {
                shape,
                size: 0.3,
                cx: 0.5,
                cy: 0.5,
                rotation: 0.3,
            };
            let img = render_photo(&g, [0, 0, 0], 32);
            let filled = img.pixels().filter(|p| p.0 == [0, 0, 0]).count();
            assert!(filled > 50, "{} filled {filled}", SHAPES[shape]);
        }
    }
}
