//! Procedural captioned shapes: scene specs, renderer, caption grammar with
//! its inverse parser, and the tab-separated benchmark prompt loader.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const IMAGE_SIDE: usize = 32;
pub const GRID: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether normalised cell coordinates `(u, v)` fall inside the glyph.
    pub fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.375 * 0.375,
            Shape::Square => (0.125..=0.875).contains(&u) && (0.125..=0.875).contains(&v),
            Shape::Triangle => {
                (0.125..=0.875).contains(&v) && (u - 0.5).abs() <= 0.375 * (v - 0.125) / 0.75
            }
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
    Orange,
    Black,
    Gray,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::Black,
        Color::Gray,
    ];

    pub fn rgb8(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 160, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 220, 0],
            Color::Purple => [128, 0, 160],
            Color::Orange => [255, 128, 0],
            Color::Black => [0, 0, 0],
            Color::Gray => [128, 128, 128],
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        self.rgb8().map(|c| c as f32 / 255.0)
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Black => "black",
            Color::Gray => "gray",
        }
    }

    /// Palette entry closest to `px` in squared RGB distance.
    pub fn nearest(px: [f32; 3]) -> Color {
        let d = |c: Color| -> f32 { c.rgb().iter().zip(px).map(|(a, b)| (a - b).powi(2)).sum() };
        Color::ALL
            .into_iter()
            .min_by(|a, b| d(*a).total_cmp(&d(*b)))
            .expect("palette nonempty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    None,
    LeftOf,
    Above,
}

impl Relation {
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::None => "next to",
            Relation::LeftOf => "to the left of",
            Relation::Above => "above",
        }
    }

    /// Cells assigned to a two-object scene with this relation.
    pub fn canonical_cells(self) -> [(u8, u8); 2] {
        match self {
            Relation::None => [(0, 0), (1, 1)],
            Relation::LeftOf => [(0, 0), (0, 1)],
            Relation::Above => [(0, 0), (1, 0)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    /// `(row, col)` in the 2x2 grid.
    pub cell: (u8, u8),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<Object>,
    pub relation: Relation,
}

impl SceneSpec {
    pub fn single(shape: Shape, color: Color) -> Self {
        Self { objects: vec![Object { shape, color, cell: (0, 0) }], relation: Relation::None }
    }

    pub fn pair(a: (Shape, Color), relation: Relation, b: (Shape, Color)) -> Self {
        let [ca, cb] = relation.canonical_cells();
        Self {
            objects: vec![
                Object { shape: a.0, color: a.1, cell: ca },
                Object { shape: b.0, color: b.1, cell: cb },
            ],
            relation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.objects.len();
        if !(1..=2).contains(&n) {
            return Err(Error::data(format!("scene needs 1 or 2 objects, got {n}")));
        }
        for o in &self.objects {
            if o.cell.0 as usize >= GRID || o.cell.1 as usize >= GRID {
                return Err(Error::data(format!("cell {:?} outside the 2x2 grid", o.cell)));
            }
        }
        if n == 1 {
            if self.relation != Relation::None {
                return Err(Error::data("relation requires two objects"));
            }
            return Ok(());
        }
        let (a, b) = (self.objects[0].cell, self.objects[1].cell);
        if a == b {
            return Err(Error::data("objects share a cell"));
        }
        let ok = match self.relation {
            Relation::None => true,
            Relation::LeftOf => a.0 == b.0 && a.1 < b.1,
            Relation::Above => a.1 == b.1 && a.0 < b.0,
        };
        if !ok {
            return Err(Error::data(format!("cells {a:?}, {b:?} contradict {:?}", self.relation)));
        }
        Ok(())
    }
}

/// Every spec reachable through the caption grammar: 24 single-object scenes
/// and 3 * 24 * 24 pairs.
pub fn canonical_specs() -> Vec<SceneSpec> {
    let atoms: Vec<(Shape, Color)> = Shape::ALL
        .into_iter()
        .flat_map(|s| Color::ALL.into_iter().map(move |c| (s, c)))
        .collect();
    let mut out: Vec<SceneSpec> = atoms.iter().map(|&(s, c)| SceneSpec::single(s, c)).collect();
    for rel in [Relation::None, Relation::LeftOf, Relation::Above] {
        for &a in &atoms {
            for &b in &atoms {
                out.push(SceneSpec::pair(a, rel, b));
            }
        }
    }
    out
}

/// Boolean coverage mask of `shape` on a `cell x cell` pixel grid, sampled at
/// pixel centres.
pub fn glyph_mask(shape: Shape, cell: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(cell * cell);
    for y in 0..cell {
        for x in 0..cell {
            let u = (x as f64 + 0.5) / cell as f64;
            let v = (y as f64 + 0.5) / cell as f64;
            m.push(shape.covers(u, v));
        }
    }
    m
}

pub fn render(spec: &SceneSpec) -> Result<Image> {
    render_at(spec, IMAGE_SIDE)
}

/// Renders at an arbitrary even side length.
pub fn render_at(spec: &SceneSpec, side: usize) -> Result<Image> {
    spec.validate()?;
    if side == 0 || !side.is_multiple_of(GRID) {
        return Err(Error::data(format!("side {side} not divisible by {GRID}")));
    }
    let cell = side / GRID;
    let mut img = Image::filled(side, side, [1.0; 3]);
    for o in &spec.objects {
        let mask = glyph_mask(o.shape, cell);
        let (y0, x0) = (o.cell.0 as usize * cell, o.cell.1 as usize * cell);
        for y in 0..cell {
            for x in 0..cell {
                if mask[y * cell + x] {
                    img.set_pixel(y0 + y, x0 + x, o.color.rgb());
                }
            }
        }
    }
    Ok(img)
}

pub fn caption(spec: &SceneSpec) -> String {
    let np = |o: &Object| format!("a {} {}", o.color.name(), o.shape.name());
    match spec.objects.as_slice() {
        [a] => np(a),
        [a, b] => format!("{} {} {}", np(a), spec.relation.phrase(), np(b)),
        _ => String::new(),
    }
}

fn parse_np(words: &[&str]) -> Option<(Shape, Color)> {
    let [a, color, shape] = words else { return None };
    if *a != "a" {
        return None;
    }
    let color = Color::ALL.into_iter().find(|c| c.name() == *color)?;
    let shape = Shape::ALL.into_iter().find(|s| s.name() == *shape)?;
    Some((shape, color))
}

/// Exact inverse of [`caption`] on grammar strings; cells are canonical.
pub fn parse_caption(text: &str) -> Result<SceneSpec> {
    let err = || Error::data(format!("caption not in grammar: {text:?}"));
    let words: Vec<&str> = text.split(' ').collect();
    if words.len() == 3 {
        let (s, c) = parse_np(&words).ok_or_else(err)?;
        return Ok(SceneSpec::single(s, c));
    }
    for rel in [Relation::None, Relation::LeftOf, Relation::Above] {
        let plen = rel.phrase().split(' ').count();
        if words.len() != 6 + plen || words[3..3 + plen].join(" ") != rel.phrase() {
            continue;
        }
        let a = parse_np(&words[..3]).ok_or_else(err)?;
        let b = parse_np(&words[3 + plen..]).ok_or_else(err)?;
        return Ok(SceneSpec::pair(a, rel, b));
    }
    Err(err())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Image,
    pub caption: String,
    pub spec: SceneSpec,
}

/// `n` examples drawn uniformly from [`canonical_specs`].
pub fn gen_dataset(n: usize, seed: u64) -> Vec<Example> {
    let space = canonical_specs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let spec = space[rng.random_range(0..space.len())].clone();
            let image = render(&spec).expect("canonical specs are valid");
            Example { image, caption: caption(&spec), spec }
        })
        .collect()
}

pub const CATEGORIES: [&str; 12] = [
    "Abstract",
    "Animals",
    "Artifacts",
    "Arts",
    "Food & Beverage",
    "Illustrations",
    "Indoor Scenes",
    "Outdoor Scenes",
    "People",
    "Produce & Plants",
    "Vehicles",
    "World Knowledge",
];

pub const CHALLENGES: [&str; 11] = [
    "Basic",
    "Complex",
    "Fine-grained Detail",
    "Imagination",
    "Linguistic Structures",
    "Perspective",
    "Properties & Positioning",
    "Quantity",
    "Simple Detail",
    "Style & Format",
    "Writing & Symbols",
];

const HEADER: [&str; 3] = ["prompt", "category", "challenge"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt: String,
    pub category: String,
    pub challenge: String,
}

impl FromStr for PromptRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::data(format!("expected 3 tab-separated columns, got {}", cols.len())));
        }
        if !CATEGORIES.contains(&cols[1]) {
            return Err(Error::data(format!("unknown category `{}`", cols[1])));
        }
        if !CHALLENGES.contains(&cols[2]) {
            return Err(Error::data(format!("unknown challenge `{}`", cols[2])));
        }
        Ok(Self { prompt: cols[0].to_string(), category: cols[1].to_string(), challenge: cols[2].to_string() })
    }
}

impl fmt::Display for PromptRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.prompt, self.category, self.challenge)
    }
}

/// Parses prompt TSV text. Blank lines are skipped; a first line equal to
/// the column names is treated as a header.
pub fn parse_prompts(text: &str) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 && line.split('\t').eq(HEADER) {
            continue;
        }
        let rec = line.parse::<PromptRecord>().map_err(|e| match e {
            Error::Data(msg) => Error::data(format!("line {}: {msg}", i + 1)),
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_prompts(path: &Path) -> Result<Vec<PromptRecord>> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::data(format!("{}: not UTF-8: {e}", path.display())))?;
    parse_prompts(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_space_size() {
        assert_eq!(canonical_specs().len(), 24 + 3 * 24 * 24);
        assert!(canonical_specs().iter().all(|s| s.validate().is_ok()));
    }

    #[test]
    fn red_circle_is_palette_exact_top_left() {
        let img = render(&SceneSpec::single(Shape::Circle, Color::Red)).unwrap();
        assert_eq!(img.pixel(8, 8), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(24, 24), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn left_of_caption_parses() {
        let s = parse_caption("a red circle to the left of a blue square").unwrap();
        assert_eq!(s.relation, Relation::LeftOf);
        assert_eq!(s.objects[0].cell, (0, 0));
        assert_eq!(s.objects[1].cell, (0, 1));
        assert_eq!(s.objects[1].color, Color::Blue);
        assert!(parse_caption("hello").is_err());
        assert!(parse_caption("a red circle").is_ok());
        assert!(parse_caption("a red circle ").is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SceneSpec::pair((Shape::Circle, Color::Red), Relation::LeftOf, (Shape::Square, Color::Blue));
        s.objects[1].cell = (1, 0);
        assert!(render(&s).is_err());
        s.objects[1].cell = (0, 0);
        s.relation = Relation::None;
        assert!(s.validate().is_err());
    }

    #[test]
    fn header_is_optional() {
        let body = "a cat\tAnimals\tBasic\nthree dogs\tAnimals\tQuantity\n";
        assert_eq!(parse_prompts(body).unwrap().len(), 2);
        let with_header = format!("prompt\tcategory\tchallenge\n{body}");
        assert_eq!(parse_prompts(&with_header).unwrap().len(), 2);
    }

    #[test]
    fn unknown_label_names_line_and_label() {
        let err = parse_prompts("a cat\tAnimals\tBasic\na dog\tFoo\tBasic\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("Foo"), "{err}");
        let err = parse_prompts("only\ttwo\n").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("columns"), "{err}");
    }
}
