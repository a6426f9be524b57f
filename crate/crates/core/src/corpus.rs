//! Synthetic scenes of coloured shapes with captions and QA pairs.
//!
//! A scene holds one or two filled shapes. Two-shape scenes are placed
//! vertically ("above") or horizontally ("left of"); videos translate the
//! whole scene a few pixels per frame and append "moving <dir>" to the caption.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::VisionInput;
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const RELATIONS: [&str; 2] = ["above", "left of"];
pub const DIRECTIONS: [&str; 4] = ["left", "right", "up", "down"];
const RGB: [[u8; 3]; 4] = [[255, 0, 0], [0, 255, 0], [0, 64, 255], [255, 255, 0]];

/// Closed QA answer set: colours, shapes, counts 1 to 4.
pub fn answer_vocab() -> Vec<String> {
    COLORS
        .iter()
        .chain(SHAPES.iter())
        .map(|s| s.to_string())
        .chain((1..=4).map(|n| n.to_string()))
        .collect()
}

pub fn answer_index(answer: &str) -> Option<usize> {
    answer_vocab().iter().position(|a| a == answer)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub color: usize,
    pub shape: usize,
    /// Centre in pixels on the first frame.
    pub cx: i32,
    pub cy: i32,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Shape>,
    /// Index into [`RELATIONS`] for two-object scenes.
    pub relation: Option<usize>,
    /// Index into [`DIRECTIONS`] for videos.
    pub motion: Option<usize>,
    pub frames: usize,
}

impl Scene {
    pub fn caption(&self) -> String {
        let name = |o: &Shape| format!("a {} {}", COLORS[o.color], SHAPES[o.shape]);
        let mut s = match (self.objects.as_slice(), self.relation) {
            ([a], _) => name(a),
            ([a, b], Some(r)) => format!("{} {} {}", name(a), RELATIONS[r], name(b)),
            _ => String::new(),
        };
        if let Some(m) = self.motion {
            s.push_str(" moving ");
            s.push_str(DIRECTIONS[m]);
        }
        s
    }

    /// Questions whose answers are unambiguous for this scene.
    pub fn qa(&self) -> Vec<QaPair> {
        let mut out = vec![QaPair {
            question: "how many shapes are there".into(),
            answer: self.objects.len().to_string(),
        }];
        for o in &self.objects {
            if self.objects.iter().filter(|p| p.shape == o.shape).count() == 1 {
                out.push(QaPair {
                    question: format!("what color is the {}", SHAPES[o.shape]),
                    answer: COLORS[o.color].into(),
                });
            }
            if self.objects.iter().filter(|p| p.color == o.color).count() == 1 {
                out.push(QaPair {
                    question: format!("what shape is the {} one", COLORS[o.color]),
                    answer: SHAPES[o.shape].into(),
                });
            }
        }
        out
    }

    /// Renders RGB bytes, frame-major, no anti-aliasing.
    pub fn render(&self, size: usize) -> Vec<u8> {
        let r = radius(size) as f64;
        let (dx, dy) = self.motion.map_or((0, 0), |m| direction(m, step(size)));
        let mut out = vec![0u8; self.frames * size * size * 3];
        for f in 0..self.frames {
            let frame = &mut out[f * size * size * 3..(f + 1) * size * size * 3];
            for o in &self.objects {
                let cx = (o.cx + dx * f as i32) as f64;
                let cy = (o.cy + dy * f as i32) as f64;
                for y in 0..size {
                    for x in 0..size {
                        let px = x as f64 + 0.5 - cx;
                        let py = y as f64 + 0.5 - cy;
                        let inside = match o.shape {
                            0 => px * px + py * py <= r * r,
                            1 => px.abs() <= r * 0.85 && py.abs() <= r * 0.85,
                            _ => py.abs() <= r && px.abs() <= (py + r) * 0.5,
                        };
                        if inside {
                            frame[(y * size + x) * 3..(y * size + x) * 3 + 3]
                                .copy_from_slice(&RGB[o.color]);
                        }
                    }
                }
            }
        }
        out
    }
}

fn radius(size: usize) -> i32 {
    (size as i32 * 5 / 32).max(2)
}

fn step(size: usize) -> i32 {
    (size as i32 / 16).max(1)
}

fn direction(m: usize, s: i32) -> (i32, i32) {
    match m {
        0 => (-s, 0),
        1 => (s, 0),
        2 => (0, -s),
        _ => (0, s),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Square frame side; must be divisible by the patch size.
    pub image_size: usize,
    pub video_fraction: f64,
    pub video_frames: usize,
    pub single_object_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 4000,
            val: 128,
            test: 128,
            image_size: 32,
            video_fraction: 0.2,
            video_frames: 4,
            single_object_fraction: 0.2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train < 2 || self.val < 2 || self.test < 2 {
            return Err(Error::Config("every split needs at least 2 items".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if self.video_frames < 1 {
            return Err(Error::Config("video_frames must be at least 1".into()));
        }
        for (name, p) in [
            ("video_fraction", self.video_fraction),
            ("single_object_fraction", self.single_object_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} not in [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub id: u64,
    pub split: Split,
    pub caption: String,
    pub qa: Vec<QaPair>,
    pub scene: Scene,
    pub vision: VisionInput,
}

impl CorpusItem {
    pub fn is_video(&self) -> bool {
        self.scene.motion.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub items: Vec<CorpusItem>,
}

fn sample_scene(cfg: &CorpusConfig, rng: &mut Rng) -> Scene {
    let size = cfg.image_size as i32;
    let r = radius(cfg.image_size);
    let video = rng.bernoulli(cfg.video_fraction);
    let frames = if video { cfg.video_frames } else { 1 };
    let motion = video.then(|| rng.below(DIRECTIONS.len()));
    // Keep every frame inside the canvas.
    let travel = step(cfg.image_size) * (frames as i32 - 1);
    let (dx, dy) = motion.map_or((0, 0), |m| direction(m, travel));
    let lo_x = r + 1 + (-dx).max(0);
    let hi_x = size - r - 1 - dx.max(0);
    let lo_y = r + 1 + (-dy).max(0);
    let hi_y = size - r - 1 - dy.max(0);
    let obj = |rng: &mut Rng, x: (i32, i32), y: (i32, i32)| Shape {
        color: rng.below(COLORS.len()),
        shape: rng.below(SHAPES.len()),
        cx: rng.range(x.0 as i64, x.1.max(x.0) as i64) as i32,
        cy: rng.range(y.0 as i64, y.1.max(y.0) as i64) as i32,
    };
    if rng.bernoulli(cfg.single_object_fraction) {
        let o = obj(rng, (lo_x, hi_x), (lo_y, hi_y));
        return Scene {
            objects: vec![o],
            relation: None,
            motion,
            frames,
        };
    }
    let relation = rng.below(RELATIONS.len());
    let gap = 1;
    let (a, b) = if relation == 0 {
        let mid = size / 2;
        let a = obj(rng, (lo_x, hi_x), (lo_y, (mid - r - gap).max(lo_y)));
        let b = obj(rng, (lo_x, hi_x), ((mid + r + gap).min(hi_y), hi_y));
        (a, b)
    } else {
        let mid = size / 2;
        let a = obj(rng, (lo_x, (mid - r - gap).max(lo_x)), (lo_y, hi_y));
        let b = obj(rng, ((mid + r + gap).min(hi_x), hi_x), (lo_y, hi_y));
        (a, b)
    };
    Scene {
        objects: vec![a, b],
        relation: Some(relation),
        motion,
        frames,
    }
}

fn to_vision(scene: &Scene, size: usize) -> VisionInput {
    let bytes = scene.render(size);
    VisionInput::new(
        scene.frames,
        size,
        size,
        3,
        bytes.iter().map(|&b| b as f32 / 255.0).collect(),
    )
    .expect("rendered frame has consistent shape")
}

/// Generates the corpus. Train captions may repeat; captions are unique
/// within the val split and within the test split.
pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed).split("corpus");
    let mut items = Vec::with_capacity(cfg.train + cfg.val + cfg.test);
    let mut next_id = 0u64;
    for (split, count, unique) in [
        (Split::Train, cfg.train, false),
        (Split::Val, cfg.val, true),
        (Split::Test, cfg.test, true),
    ] {
        let mut rng = root.split(&format!("{split:?}"));
        let mut seen = HashSet::new();
        let mut attempts = 0usize;
        let mut made = 0;
        while made < count {
            attempts += 1;
            if attempts > count * 1000 {
                return Err(Error::Config(format!(
                    "cannot draw {count} distinct captions for the {split:?} split"
                )));
            }
            let scene = sample_scene(cfg, &mut rng);
            let caption = scene.caption();
            if unique && !seen.insert(caption.clone()) {
                continue;
            }
            items.push(CorpusItem {
                id: next_id,
                split,
                qa: scene.qa(),
                vision: to_vision(&scene, cfg.image_size),
                caption,
                scene,
            });
            next_id += 1;
            made += 1;
        }
    }
    Ok(Corpus {
        config: cfg.clone(),
        items,
    })
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: u64,
    split: Split,
    caption: String,
    qa: Vec<QaPair>,
    scene: Scene,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Index {
    version: u32,
    config: CorpusConfig,
    items: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";
pub const PIXELS_FILE: &str = "pixels.bin";

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&CorpusItem> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    /// Writes `index.json` and `pixels.bin` (u8 RGB, frame-major) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut pixels = Vec::new();
        let mut entries = Vec::with_capacity(self.items.len());
        for item in &self.items {
            let bytes = item.scene.render(self.config.image_size);
            entries.push(IndexEntry {
                id: item.id,
                split: item.split,
                caption: item.caption.clone(),
                qa: item.qa.clone(),
                scene: item.scene.clone(),
                frames: item.vision.frames,
                height: item.vision.height,
                width: item.vision.width,
                channels: item.vision.channels,
                offset: pixels.len() as u64,
                len: bytes.len() as u64,
            });
            pixels.extend_from_slice(&bytes);
        }
        let index = Index {
            version: 1,
            config: self.config.clone(),
            items: entries,
        };
        fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(&index)?)?;
        fs::write(dir.join(PIXELS_FILE), pixels)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: Index = serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)?;
        if index.version != 1 {
            return Err(Error::Format(format!("corpus index version {}", index.version)));
        }
        let pixels = fs::read(dir.join(PIXELS_FILE))?;
        let mut items = Vec::with_capacity(index.items.len());
        for e in index.items {
            let end = e.offset.checked_add(e.len).filter(|&x| x as usize <= pixels.len());
            let end = end.ok_or_else(|| Error::Format(format!("item {} outside pixel file", e.id)))?;
            let bytes = &pixels[e.offset as usize..end as usize];
            let vision = VisionInput::new(
                e.frames,
                e.height,
                e.width,
                e.channels,
                bytes.iter().map(|&b| b as f32 / 255.0).collect(),
            )?;
            items.push(CorpusItem {
                id: e.id,
                split: e.split,
                caption: e.caption,
                qa: e.qa,
                scene: e.scene,
                vision,
            });
        }
        Ok(Self {
            config: index.config,
            items,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn captions_follow_the_grammar() {
        let scene = Scene {
            objects: vec![
                Shape { color: 0, shape: 0, cx: 8, cy: 8 },
                Shape { color: 2, shape: 1, cx: 8, cy: 24 },
            ],
            relation: Some(0),
            motion: None,
            frames: 1,
        };
        assert_eq!(scene.caption(), "a red circle above a blue square");
        let qa = scene.qa();
        assert!(qa.contains(&QaPair {
            question: "what color is the circle".into(),
            answer: "red".into()
        }));
        assert!(qa.iter().all(|q| answer_index(&q.answer).is_some()));
    }

    #[test]
    fn answer_vocab_is_closed() {
        assert_eq!(answer_vocab().len(), 11);
    }
}
