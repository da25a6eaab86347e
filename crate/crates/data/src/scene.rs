//! Procedural stimulus images with template captions.
//!
//! A semantic class is a (shape, color) pair. Position, size, background
//! texture and caption template vary per stimulus.

use neurodecode_core::{Error, Result, Rng, Tensor};
use serde::{Deserialize, Serialize};

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.15]),
    ("magenta", [0.9, 0.2, 0.85]),
    ("cyan", [0.15, 0.9, 0.9]),
    ("orange", [1.0, 0.55, 0.1]),
    ("white", [0.97, 0.97, 0.97]),
];
pub const TEXTURES: [&str; 4] = ["plain", "striped", "lined", "checkered"];
pub const MAX_CLASSES: usize = SHAPES.len() * COLORS.len();

pub const PAD: usize = 0;
pub const UNK: usize = 1;
/// Caption length including padding.
pub const CAPTION_LEN: usize = 8;

const WORDS: [&str; 19] = [
    "<pad>", "<unk>", "a", "the", "on", "at", "with", "background", "small", "large", "left", "center", "right", "top", "middle",
    "bottom", "photo", "of", "shape",
];

/// Token vocabulary: fixed words followed by colors, shapes and textures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut words: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
        words.extend(COLORS.iter().map(|(c, _)| c.to_string()));
        words.extend(SHAPES.iter().map(|s| s.to_string()));
        words.extend(TEXTURES.iter().map(|t| t.to_string()));
        Self { words }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Unknown words map to the reserved `<unk>` id.
    pub fn id(&self, word: &str) -> usize {
        self.words.iter().position(|w| w == word).unwrap_or(UNK)
    }

    /// Whitespace tokenization, padded or truncated to `CAPTION_LEN`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = text.split_whitespace().map(|w| self.id(&w.to_lowercase())).take(CAPTION_LEN).collect();
        ids.resize(CAPTION_LEN, PAD);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter(|&&i| i != PAD).map(|&i| self.words.get(i).map_or("<unk>", |w| w.as_str())).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub label: usize,
    pub shape: usize,
    pub color: usize,
    /// Center in `[0, 1]` image coordinates.
    pub cx: f64,
    pub cy: f64,
    /// Half-extent as a fraction of the image size.
    pub radius: f64,
    pub texture: usize,
    pub texture_period: f64,
    pub background: [f64; 3],
    pub template: usize,
}

impl SceneParams {
    pub fn sample(label: usize, rng: &mut Rng) -> Self {
        Self {
            label,
            shape: label % SHAPES.len(),
            color: label / SHAPES.len(),
            cx: rng.uniform_range(0.3, 0.7),
            cy: rng.uniform_range(0.3, 0.7),
            radius: rng.uniform_range(0.18, 0.3),
            texture: rng.below(TEXTURES.len()),
            texture_period: rng.uniform_range(0.12, 0.25),
            background: [rng.uniform_range(0.05, 0.35), rng.uniform_range(0.05, 0.35), rng.uniform_range(0.05, 0.35)],
            template: rng.below(3),
        }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        let (dx, dy, r) = (x - self.cx, y - self.cy, self.radius);
        match self.shape {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
            _ => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
        }
    }

    fn texture_value(&self, x: f64, y: f64) -> f64 {
        let f = |v: f64| if (v / self.texture_period).floor() as i64 % 2 == 0 { 1.0 } else { -1.0 };
        match self.texture {
            0 => 0.0,
            1 => f(y),
            2 => f(x),
            _ => f(x) * f(y),
        }
    }

    /// Renders a `[3, size, size]` image with 4× supersampling.
    pub fn render(&self, size: usize) -> Tensor {
        let n = size * size;
        let mut data = vec![0.0; 3 * n];
        let fg = COLORS[self.color].1;
        const SUB: [f64; 2] = [0.25, 0.75];
        for i in 0..size {
            for j in 0..size {
                let mut acc = [0.0; 3];
                for sy in SUB {
                    for sx in SUB {
                        let (x, y) = ((j as f64 + sx) / size as f64, (i as f64 + sy) / size as f64);
                        let px = if self.inside(x, y) {
                            fg
                        } else {
                            let t = 0.08 * self.texture_value(x, y);
                            [self.background[0] + t, self.background[1] + t, self.background[2] + t]
                        };
                        for c in 0..3 {
                            acc[c] += px[c] / 4.0;
                        }
                    }
                }
                for c in 0..3 {
                    data[c * n + i * size + j] = acc[c].clamp(0.0, 1.0);
                }
            }
        }
        Tensor::new(&[3, size, size], data).expect("consistent shape")
    }

    pub fn caption_text(&self) -> String {
        let color = COLORS[self.color].0;
        let shape = SHAPES[self.shape];
        let size = if self.radius < 0.24 { "small" } else { "large" };
        let h = if self.cx < 0.43 {
            "left"
        } else if self.cx > 0.57 {
            "right"
        } else {
            "center"
        };
        let v = if self.cy < 0.43 {
            "top"
        } else if self.cy > 0.57 {
            "bottom"
        } else {
            "middle"
        };
        let tex = TEXTURES[self.texture];
        match self.template {
            0 => format!("a {size} {color} {shape} {h} on {tex} background"),
            1 => format!("the {color} {shape} at {v} {h} with {tex}"),
            _ => format!("{size} {color} {shape} on {tex} background at {h}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stimulus {
    pub id: usize,
    pub image: Tensor,
    pub caption: Vec<usize>,
    pub label: usize,
    pub scene: SceneParams,
}

/// Generates `n` stimuli cycling through `classes` semantic labels.
pub fn generate_stimuli(n: usize, classes: usize, size: usize, vocab: &Vocab, rng: &mut Rng) -> Result<Vec<Stimulus>> {
    if !(1..=MAX_CLASSES).contains(&classes) {
        return Err(Error::Config(format!("class count must be in 1..={MAX_CLASSES}, got {classes}")));
    }
    if size < 4 {
        return Err(Error::Config(format!("image size {size} is too small")));
    }
    Ok((0..n)
        .map(|id| {
            let label = rng.below(classes);
            let scene = SceneParams::sample(label, rng);
            Stimulus { id, image: scene.render(size), caption: vocab.encode(&scene.caption_text()), label, scene }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn captions_round_trip_through_vocab() {
        let vocab = Vocab::default();
        let mut rng = Rng::new(3);
        for s in generate_stimuli(30, 32, 16, &vocab, &mut rng).unwrap() {
            let text = s.scene.caption_text();
            assert_eq!(vocab.decode(&s.caption), text);
            assert!(!s.caption.contains(&UNK) && s.caption[0] != PAD);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(vocab.encode("zebra")[0], UNK);
    }

    #[test]
    fn class_determines_shape_and_color_words() {
        let vocab = Vocab::default();
        let mut rng = Rng::new(4);
        for s in generate_stimuli(20, 8, 16, &vocab, &mut rng).unwrap() {
            assert!(s.caption.contains(&vocab.id(SHAPES[s.label % 4])));
            assert!(s.caption.contains(&vocab.id(COLORS[s.label / 4].0)));
        }
    }
}
