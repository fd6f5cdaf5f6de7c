//! Procedural concept scenes.
//!
//! A scene is a patterned grey background under a colour tint and a
//! directional brightness ramp, with one coloured shape composited on top.
//! All patterns repeat on the 4-pixel grid so every probe can recover the
//! generating attributes analytically.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 16;
pub const OBJECT_SIZE: usize = 8;
/// Object offsets along each axis.
pub const PLACEMENTS: [usize; 3] = [3, 4, 5];

macro_rules! word_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

word_enum!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Cross => "cross",
});

word_enum!(Color {
    Red => "red",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
});

word_enum!(
    /// Background pattern.
    Texture {
        Stripes => "stripes",
        Checker => "checker",
        Dots => "dots",
        Plain => "plain",
    }
);

word_enum!(
    /// Global colour tint.
    Tone {
        Warm => "warm",
        Cool => "cool",
        Green => "green",
        Neutral => "neutral",
    }
);

word_enum!(
    /// Side of the image the brightness ramp rises towards.
    Light {
        Left => "left",
        Right => "right",
        Top => "top",
        Bottom => "bottom",
    }
);

/// Personalizable concept categories. The object concept is named by its
/// shape word and personalizes the object's colour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Object,
    Texture,
    Tone,
    Light,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Object, Category::Texture, Category::Tone, Category::Light];

    pub fn name(self) -> &'static str {
        match self {
            Category::Object => "object",
            Category::Texture => "texture",
            Category::Tone => "tone",
            Category::Light => "light",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Category::ALL.into_iter().find(|c| c.name() == s)
    }

    /// The concept word for this category in a given scene.
    pub fn concept_word(self, spec: &SceneSpec) -> &'static str {
        match self {
            Category::Object => spec.shape.word(),
            Category::Texture => "texture",
            Category::Tone => "tone",
            Category::Light => "light",
        }
    }

    /// Category of a concept word, if it names one.
    pub fn of_concept_word(word: &str) -> Option<Self> {
        match word {
            "texture" => Some(Category::Texture),
            "tone" => Some(Category::Tone),
            "light" => Some(Category::Light),
            w if Shape::from_word(w).is_some() => Some(Category::Object),
            _ => None,
        }
    }

    /// Attribute word carried by this concept in `spec`.
    pub fn attribute_word(self, spec: &SceneSpec) -> &'static str {
        match self {
            Category::Object => spec.color.word(),
            Category::Texture => spec.texture.word(),
            Category::Tone => spec.tone.word(),
            Category::Light => spec.light.word(),
        }
    }

    /// Number of values the attribute can take.
    pub fn cardinality(self) -> usize {
        4
    }

    /// Probe category scoring this concept's attribute.
    pub fn probe(self) -> ProbeCategory {
        match self {
            Category::Object => ProbeCategory::Color,
            Category::Texture => ProbeCategory::Texture,
            Category::Tone => ProbeCategory::Tone,
            Category::Light => ProbeCategory::Light,
        }
    }
}

/// Everything the analytic probes can read back from an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProbeCategory {
    Shape,
    Color,
    Texture,
    Tone,
    Light,
}

impl ProbeCategory {
    pub const ALL: [ProbeCategory; 5] = [
        ProbeCategory::Shape,
        ProbeCategory::Color,
        ProbeCategory::Texture,
        ProbeCategory::Tone,
        ProbeCategory::Light,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeCategory::Shape => "shape",
            ProbeCategory::Color => "color",
            ProbeCategory::Texture => "texture",
            ProbeCategory::Tone => "tone",
            ProbeCategory::Light => "light",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ProbeCategory::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown probe category {s:?}")))
    }

    pub fn value_word(self, spec: &SceneSpec) -> &'static str {
        match self {
            ProbeCategory::Shape => spec.shape.word(),
            ProbeCategory::Color => spec.color.word(),
            ProbeCategory::Texture => spec.texture.word(),
            ProbeCategory::Tone => spec.tone.word(),
            ProbeCategory::Light => spec.light.word(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub texture: Texture,
    pub tone: Tone,
    pub light: Light,
    /// Index into the `PLACEMENTS × PLACEMENTS` grid, row-major.
    pub placement: u8,
}

impl SceneSpec {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        SceneSpec {
            shape: Shape::ALL[rng.random_range(0..4)],
            color: Color::ALL[rng.random_range(0..4)],
            texture: Texture::ALL[rng.random_range(0..4)],
            tone: Tone::ALL[rng.random_range(0..4)],
            light: Light::ALL[rng.random_range(0..4)],
            placement: rng.random_range(0..(PLACEMENTS.len() * PLACEMENTS.len()) as u8),
        }
    }

    /// `(x, y)` of the object's top-left corner.
    pub fn offset(&self) -> (usize, usize) {
        let n = PLACEMENTS.len();
        let p = self.placement as usize % (n * n);
        (PLACEMENTS[p % n], PLACEMENTS[p / n])
    }

    pub fn with_attribute(mut self, category: Category, other: &SceneSpec) -> Self {
        match category {
            Category::Object => {
                self.shape = other.shape;
                self.color = other.color;
            }
            Category::Texture => self.texture = other.texture,
            Category::Tone => self.tone = other.tone,
            Category::Light => self.light = other.light,
        }
        self
    }

    pub fn to_codes(&self) -> [u32; 6] {
        [
            self.shape.index() as u32,
            self.color.index() as u32,
            self.texture.index() as u32,
            self.tone.index() as u32,
            self.light.index() as u32,
            self.placement as u32,
        ]
    }

    pub fn from_codes(c: &[u32]) -> Result<Self> {
        let bad = || Error::Format(format!("invalid scene codes {c:?}"));
        if c.len() != 6 || c[5] as usize >= PLACEMENTS.len() * PLACEMENTS.len() {
            return Err(bad());
        }
        Ok(SceneSpec {
            shape: Shape::from_index(c[0] as usize).ok_or_else(bad)?,
            color: Color::from_index(c[1] as usize).ok_or_else(bad)?,
            texture: Texture::from_index(c[2] as usize).ok_or_else(bad)?,
            tone: Tone::from_index(c[3] as usize).ok_or_else(bad)?,
            light: Light::from_index(c[4] as usize).ok_or_else(bad)?,
            placement: c[5] as u8,
        })
    }
}

pub(crate) const PATTERN_HIGH: f64 = 0.85;
pub(crate) const PATTERN_LOW: f64 = 0.45;
pub(crate) const PLAIN_LEVEL: f64 = 0.65;
/// Ramp from `exp(−LIGHT_RANGE)` on the dark side to 1 on the lit side.
pub(crate) const LIGHT_RANGE: f64 = 1.2;

/// Whether pixel `(x, y)` sits on the dark part of a pattern.
pub(crate) fn pattern_dark(t: Texture, x: usize, y: usize) -> Option<bool> {
    match t {
        Texture::Stripes => Some(x % 4 < 2),
        Texture::Checker => Some((x / 2 + y / 2) % 2 == 0),
        Texture::Dots => Some((1..3).contains(&(x % 4)) && (1..3).contains(&(y % 4))),
        Texture::Plain => None,
    }
}

pub(crate) fn pattern_level(t: Texture, x: usize, y: usize) -> f64 {
    match pattern_dark(t, x, y) {
        Some(true) => PATTERN_LOW,
        Some(false) => PATTERN_HIGH,
        None => PLAIN_LEVEL,
    }
}

pub(crate) fn tint(t: Tone) -> [f64; 3] {
    match t {
        Tone::Warm => [1.0, 0.75, 0.5],
        Tone::Cool => [0.5, 0.75, 1.0],
        Tone::Green => [0.6, 1.0, 0.6],
        Tone::Neutral => [0.85, 0.85, 0.85],
    }
}

pub(crate) fn base_color(c: Color) -> [f64; 3] {
    match c {
        Color::Red => [0.95, 0.2, 0.2],
        Color::Blue => [0.2, 0.3, 0.95],
        Color::Yellow => [0.95, 0.9, 0.2],
        Color::Purple => [0.65, 0.2, 0.9],
    }
}

/// Position along the ramp in `[0, 1]`, 1 on the lit side.
pub(crate) fn ramp(l: Light, x: usize, y: usize) -> f64 {
    let m = (IMAGE_SIZE - 1) as f64;
    match l {
        Light::Left => 1.0 - x as f64 / m,
        Light::Right => x as f64 / m,
        Light::Top => 1.0 - y as f64 / m,
        Light::Bottom => y as f64 / m,
    }
}

pub(crate) fn light_factor(l: Light, x: usize, y: usize) -> f64 {
    (LIGHT_RANGE * (ramp(l, x, y) - 1.0)).exp()
}

/// `OBJECT_SIZE × OBJECT_SIZE` mask of a shape.
pub fn shape_mask(s: Shape) -> [[bool; OBJECT_SIZE]; OBJECT_SIZE] {
    let mut m = [[false; OBJECT_SIZE]; OBJECT_SIZE];
    let c = (OBJECT_SIZE as f64 - 1.0) / 2.0;
    for (y, row) in m.iter_mut().enumerate() {
        for (x, cell) in row.iter_mut().enumerate() {
            let (fx, fy) = (x as f64 - c, y as f64 - c);
            *cell = match s {
                Shape::Circle => fx * fx + fy * fy <= 3.6 * 3.6,
                Shape::Square => (1..7).contains(&x) && (1..7).contains(&y),
                // Apex at the top row, base on the bottom row.
                Shape::Triangle => fx.abs() <= (y as f64 + 0.5) / 2.0,
                Shape::Cross => (3..5).contains(&x) || (3..5).contains(&y),
            };
        }
    }
    m
}

/// Peak amplitude of the seeded per-pixel grain.
pub(crate) const GRAIN: f64 = 0.02;

/// Deterministic raster of `spec` as an `[H, W, 3]` tensor in `[0, 1]`.
/// The seed only drives a faint per-pixel grain, so distinct samples of the
/// same spec differ while every attribute stays recoverable.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = IMAGE_SIZE;
    let mask = shape_mask(spec.shape);
    let (ox, oy) = spec.offset();
    let t = tint(spec.tone);
    let col = base_color(spec.color);
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let inside = x >= ox && y >= oy && x < ox + OBJECT_SIZE && y < oy + OBJECT_SIZE && mask[y - oy][x - ox];
            let base = if inside {
                col
            } else {
                let g = pattern_level(spec.texture, x, y);
                [g, g, g]
            };
            let f = light_factor(spec.light, x, y);
            for c in 0..3 {
                let g = rng.random_range(-GRAIN..=GRAIN);
                data.push((base[c] * f * t[c] + g).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_parts(vec![n, n, 3], data)
}

/// Scene that shares `category`'s attribute with `spec` and draws every
/// other attribute from `seed`. Used as the concept image for that concept.
pub fn concept_exemplar(spec: &SceneSpec, category: Category, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SceneSpec::random(&mut rng).with_attribute(category, spec)
}

pub const CAPTION_LEN: usize = 12;

/// A prompt with the positions of its concept words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub words: Vec<&'static str>,
    /// `(category, token index)` for each concept word, in category order.
    pub concepts: Vec<(Category, usize)>,
}

impl Prompt {
    pub fn token_of(&self, category: Category) -> Option<usize> {
        self.concepts.iter().find(|(c, _)| *c == category).map(|&(_, i)| i)
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// Template prompt for `spec` with the attribute words of `omit` left out,
/// so those concepts are named by their concept word alone.
pub fn prompt_without(spec: &SceneSpec, omit: &[Category]) -> Prompt {
    let keep = |c: Category| !omit.contains(&c);
    let mut words = vec!["a"];
    let mut concepts = Vec::new();
    if keep(Category::Object) {
        words.push(spec.color.word());
    }
    concepts.push((Category::Object, words.len()));
    words.push(spec.shape.word());
    words.push("on");
    if keep(Category::Texture) {
        words.push(spec.texture.word());
    }
    concepts.push((Category::Texture, words.len()));
    words.push("texture");
    words.push("with");
    if keep(Category::Tone) {
        words.push(spec.tone.word());
    }
    concepts.push((Category::Tone, words.len()));
    words.push("tone");
    words.push("and");
    if keep(Category::Light) {
        words.push(spec.light.word());
    }
    concepts.push((Category::Light, words.len()));
    words.push("light");
    Prompt { words, concepts }
}

/// `a <color> <shape> on <texture> texture with <tone> tone and <light> light`.
pub fn caption(spec: &SceneSpec) -> Prompt {
    prompt_without(spec, &[])
}

/// `p⁺` for one concept: its attribute word followed by the concept word.
pub fn attribute_caption(spec: &SceneSpec, concept_word: &str) -> Result<Vec<&'static str>> {
    let category = Category::of_concept_word(concept_word)
        .filter(|c| c.concept_word(spec) == concept_word)
        .ok_or_else(|| Error::Invalid(format!("{concept_word:?} is not a concept of this scene")))?;
    Ok(vec![category.attribute_word(spec), category.concept_word(spec)])
}
