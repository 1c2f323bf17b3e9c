//! A synthetic referring-grid world.
//!
//! Scenes place 2 to 6 coloured shapes on distinct cells of an 8x8 grid.
//! Expressions refer to exactly one object, either by attributes
//! (`"red square"`) or by a strict spatial relation to a uniquely described
//! landmark (`"red square left of blue disc"`). Two question kinds
//! (`"count red square"`, `"exist red square"`) feed the answer head.
//!
//! Images are never stored: an example keeps its scene seed and the image is
//! re-rendered on demand.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const GRID: usize = 8;
pub const CELL_PX: usize = 8;
pub const IMAGE_PX: usize = GRID * CELL_PX;
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const BACKGROUND: f32 = 0.1;
pub const MAX_OBJECTS: usize = 6;
const REJECTION_CAP: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disc,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Disc, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disc => "disc",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether pixel `(u, v)` of the 6x6 box is painted.
    fn covers(self, u: usize, v: usize) -> bool {
        match self {
            Shape::Square => true,
            Shape::Disc => !((u == 0 || u == 5) && (v == 0 || v == 5)),
            Shape::Triangle => v <= u,
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.1],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Yellow => [0.9, 0.85, 0.1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    /// Row-major cell index in `[0, GRID * GRID)`.
    pub cell: usize,
    pub shape: Shape,
    pub color: Color,
}

impl Object {
    pub fn row(&self) -> usize {
        self.cell / GRID
    }

    pub fn col(&self) -> usize {
        self.cell % GRID
    }

    fn same_kind(&self, other: &Object) -> bool {
        self.shape == other.shape && self.color == other.color
    }

    fn describe(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub objects: Vec<Object>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Strict comparison of cell coordinates; ties never hold.
    pub fn holds(self, a: &Object, b: &Object) -> bool {
        match self {
            Relation::LeftOf => a.col() < b.col(),
            Relation::RightOf => a.col() > b.col(),
            Relation::Above => a.row() < b.row(),
            Relation::Below => a.row() > b.row(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Attribute,
    Spatial,
    Count,
    Exist,
}

impl Kind {
    /// Kinds whose target is a grid cell.
    pub const LOCATE: [Kind; 2] = [Kind::Attribute, Kind::Spatial];
    /// Kinds whose target is an answer label.
    pub const ANSWER: [Kind; 2] = [Kind::Count, Kind::Exist];

    pub fn is_locate(self) -> bool {
        matches!(self, Kind::Attribute | Kind::Spatial)
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Attribute => "attribute",
            Kind::Spatial => "spatial",
            Kind::Count => "count",
            Kind::Exist => "exist",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Answer labels: `yes`, `no`, then counts `0..=5`.
pub const ANSWER_YES: usize = 0;
pub const ANSWER_NO: usize = 1;
/// Largest count the answer set can express.
pub const MAX_COUNT: usize = 5;

pub fn count_answer(n: usize) -> usize {
    2 + n
}

pub fn answer_label(a: usize) -> String {
    match a {
        ANSWER_YES => "yes".into(),
        ANSWER_NO => "no".into(),
        n => (n - 2).to_string(),
    }
}

/// Samples a scene. Deterministic per seed; rejects scenes without any
/// attribute-unique object.
pub fn gen_scene(seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..REJECTION_CAP {
        let count = rng.gen_range(2..=MAX_OBJECTS);
        let cells = index::sample(&mut rng, GRID * GRID, count);
        let objects: Vec<Object> = cells
            .iter()
            .map(|cell| Object {
                cell,
                shape: *Shape::ALL.choose(&mut rng).expect("non-empty"),
                color: *Color::ALL.choose(&mut rng).expect("non-empty"),
            })
            .collect();
        let scene = Scene { seed, objects };
        if scene.objects.iter().any(|o| scene.is_unique(o)) {
            return Ok(scene);
        }
    }
    Err(Error::Generation(format!("seed {seed}: no describable scene after {REJECTION_CAP} draws")))
}

impl Scene {
    fn is_unique(&self, o: &Object) -> bool {
        self.objects.iter().filter(|p| p.same_kind(o)).count() == 1
    }

    fn count_of(&self, color: Color, shape: Shape) -> usize {
        self.objects.iter().filter(|o| o.color == color && o.shape == shape).count()
    }

    /// All `(target, relation, landmark)` triples where the landmark is
    /// attribute-unique and the target is the only object of its kind that
    /// stands in that relation to it.
    pub fn spatial_candidates(&self) -> Vec<(usize, Relation, usize)> {
        let mut out = Vec::new();
        for (li, lm) in self.objects.iter().enumerate() {
            if !self.is_unique(lm) {
                continue;
            }
            for (ti, t) in self.objects.iter().enumerate() {
                if ti == li {
                    continue;
                }
                for rel in Relation::ALL {
                    if !rel.holds(t, lm) {
                        continue;
                    }
                    let rivals = self
                        .objects
                        .iter()
                        .enumerate()
                        .filter(|&(i, o)| i != li && o.same_kind(t) && rel.holds(o, lm))
                        .count();
                    if rivals == 1 {
                        out.push((ti, rel, li));
                    }
                }
            }
        }
        out
    }
}

/// An expression of the requested kind and its target: a cell for locate
/// kinds, an answer label otherwise. `None` when the scene has no valid referent.
pub fn gen_expression(scene: &Scene, kind: Kind, rng: &mut ChaCha8Rng) -> Option<(String, usize)> {
    match kind {
        Kind::Attribute => {
            let unique: Vec<&Object> = scene.objects.iter().filter(|o| scene.is_unique(o)).collect();
            unique.choose(rng).map(|o| (o.describe(), o.cell))
        }
        Kind::Spatial => {
            let cands = scene.spatial_candidates();
            cands.choose(rng).map(|&(t, rel, l)| {
                let (t, l) = (&scene.objects[t], &scene.objects[l]);
                (format!("{} {} {}", t.describe(), rel.phrase(), l.describe()), t.cell)
            })
        }
        Kind::Count | Kind::Exist => {
            // Half the questions ask about a kind present in the scene.
            let (color, shape) = if rng.gen_bool(0.5) {
                let o = scene.objects.choose(rng)?;
                (o.color, o.shape)
            } else {
                (*Color::ALL.choose(rng)?, *Shape::ALL.choose(rng)?)
            };
            let n = scene.count_of(color, shape);
            if n > MAX_COUNT {
                return None;
            }
            let words = format!("{} {}", color.word(), shape.word());
            Some(if kind == Kind::Count {
                (format!("count {words}"), count_answer(n))
            } else {
                (format!("exist {words}"), if n > 0 { ANSWER_YES } else { ANSWER_NO })
            })
        }
    }
}

/// Renders a scene as a `[64, 64, 3]` image.
pub fn render(scene: &Scene) -> Tensor<f32> {
    let mut img = Tensor::full([IMAGE_PX, IMAGE_PX, 3], BACKGROUND);
    paint(scene, img.data_mut());
    img
}

/// Renders into a `64 * 64 * 3` buffer that is already filled with the background.
fn paint(scene: &Scene, buf: &mut [f32]) {
    for o in &scene.objects {
        let rgb = o.color.rgb();
        let (r0, c0) = (o.row() * CELL_PX + 1, o.col() * CELL_PX + 1);
        for u in 0..6 {
            for v in 0..6 {
                if o.shape.covers(u, v) {
                    let p = ((r0 + u) * IMAGE_PX + c0 + v) * 3;
                    buf[p..p + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
}

/// Every word the grammar can produce.
pub fn vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = Color::ALL.iter().map(|c| c.word()).collect();
    words.extend(Shape::ALL.iter().map(|s| s.word()));
    words.extend(["left", "right", "of", "above", "below", "count", "exist"]);
    Vocabulary::from_words(words)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One dataset record. The image is `render(gen_scene(seed))`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub expression: String,
    pub target: usize,
    pub seed: u64,
    pub kind: Kind,
    pub split: Split,
}

impl Example {
    pub fn scene(&self) -> Result<Scene> {
        gen_scene(self.seed)
    }

    pub fn image(&self) -> Result<Tensor<f32>> {
        Ok(render(&self.scene()?))
    }
}

/// Renders a batch of examples into `[B, 64, 64, 3]`.
pub fn render_batch(examples: &[&Example]) -> Result<Tensor<f32>> {
    let per = IMAGE_PX * IMAGE_PX * 3;
    let mut data = vec![BACKGROUND; examples.len() * per];
    for (ex, buf) in examples.iter().zip(data.chunks_mut(per)) {
        paint(&ex.scene()?, buf);
    }
    Tensor::new([examples.len(), IMAGE_PX, IMAGE_PX, 3], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub grid: usize,
    pub cell_px: usize,
}

impl Default for Header {
    fn default() -> Self {
        Self { version: DATASET_VERSION, grid: GRID, cell_px: CELL_PX }
    }
}

/// Generates `n_train + n_test` examples with kinds drawn uniformly from
/// `kinds`. Scene seeds are unique across the whole set, so splits never
/// share a (seed, expression) pair.
pub fn generate(n_train: usize, n_test: usize, seed: u64, kinds: &[Kind]) -> Result<Vec<Example>> {
    if kinds.is_empty() {
        return Err(Error::config("at least one expression kind is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(n_train + n_test);
    while out.len() < n_train + n_test {
        let scene_seed: u64 = rng.gen();
        if !used.insert(scene_seed) {
            continue;
        }
        let kind = *kinds.choose(&mut rng).expect("non-empty");
        let scene = gen_scene(scene_seed)?;
        let Some((expression, target)) = gen_expression(&scene, kind, &mut rng) else {
            continue;
        };
        let split = if out.len() < n_train { Split::Train } else { Split::Test };
        out.push(Example { expression, target, seed: scene_seed, kind, split });
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &Header::default())?;
    w.write_all(b"\n")?;
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| parse_err(1, "empty file, expected a header".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.version != DATASET_VERSION {
        return Err(Error::Version { expected: DATASET_VERSION, found: header.version });
    }
    if header.grid != GRID || header.cell_px != CELL_PX {
        return Err(parse_err(
            1,
            format!("grid {}x{}px is not the supported {GRID}x{CELL_PX}px", header.grid, header.cell_px),
        ));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn split(examples: &[Example], which: Split) -> Vec<Example> {
    examples.iter().filter(|e| e.split == which).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_sized() {
        for seed in 0..200 {
            let a = gen_scene(seed).unwrap();
            assert_eq!(a, gen_scene(seed).unwrap());
            assert!((2..=6).contains(&a.objects.len()));
        }
    }

    #[test]
    fn single_red_square_is_named() {
        let scene = Scene {
            seed: 0,
            objects: vec![
                Object { cell: 3, shape: Shape::Square, color: Color::Red },
                Object { cell: 9, shape: Shape::Disc, color: Color::Blue },
                Object { cell: 10, shape: Shape::Disc, color: Color::Blue },
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(gen_expression(&scene, Kind::Attribute, &mut rng).unwrap(), ("red square".to_string(), 3));
        }
    }

    #[test]
    fn ambiguous_attributes_are_never_emitted() {
        let scene = Scene {
            seed: 0,
            objects: vec![
                Object { cell: 0, shape: Shape::Disc, color: Color::Blue },
                Object { cell: 1, shape: Shape::Disc, color: Color::Blue },
                Object { cell: 2, shape: Shape::Triangle, color: Color::Green },
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(gen_expression(&scene, Kind::Attribute, &mut rng).unwrap().0, "green triangle");
        }
        // Both blue discs are left of the triangle, but only cell 1 is right of cell 0.
        let sp = scene.spatial_candidates();
        assert!(sp.iter().all(|&(t, _, l)| scene.objects[l].shape == Shape::Triangle && scene.is_unique(&scene.objects[l]) && t != l));
        assert!(sp.iter().all(|&(_, r, _)| r != Relation::LeftOf));
    }

    #[test]
    fn render_paints_documented_pixels() {
        let square = Scene { seed: 0, objects: vec![Object { cell: 9, shape: Shape::Square, color: Color::Red }] };
        let disc = Scene { seed: 0, objects: vec![Object { cell: 9, shape: Shape::Disc, color: Color::Red }] };
        let (a, b) = (render(&square), render(&disc));
        let diff: Vec<usize> = (0..IMAGE_PX * IMAGE_PX)
            .filter(|&p| a.data()[p * 3..p * 3 + 3] != b.data()[p * 3..p * 3 + 3])
            .collect();
        let corners: Vec<usize> = [(9, 9), (9, 14), (14, 9), (14, 14)].iter().map(|&(r, c)| r * IMAGE_PX + c).collect();
        assert_eq!(diff, corners);
        // Empty cell 0 stays background.
        for r in 0..8 {
            for c in 0..8 {
                assert!(a.data()[(r * IMAGE_PX + c) * 3..][..3].iter().all(|&v| v == BACKGROUND));
            }
        }
        let tri = render(&Scene { seed: 0, objects: vec![Object { cell: 0, shape: Shape::Triangle, color: Color::Blue }] });
        let painted = |r: usize, c: usize| tri.data()[(r * IMAGE_PX + c) * 3 + 2] != BACKGROUND;
        assert!(painted(6, 1) && painted(6, 6) && painted(1, 1) && !painted(1, 2));
    }

    #[test]
    fn batch_render_matches_single() {
        let ex = generate(3, 0, 5, &Kind::LOCATE).unwrap();
        let refs: Vec<&Example> = ex.iter().collect();
        let batch = render_batch(&refs).unwrap();
        let per = IMAGE_PX * IMAGE_PX * 3;
        for (i, e) in ex.iter().enumerate() {
            assert_eq!(&batch.data()[i * per..][..per], e.image().unwrap().data());
        }
    }

    #[test]
    fn vocabulary_covers_grammar() {
        let v = vocabulary();
        for ex in generate(200, 0, 3, &[Kind::Attribute, Kind::Spatial, Kind::Count, Kind::Exist]).unwrap() {
            assert!(v.tokenize(&ex.expression).unwrap().iter().all(|&id| id > 1), "{}", ex.expression);
        }
    }

    #[test]
    fn answer_labels() {
        assert_eq!(answer_label(ANSWER_YES), "yes");
        assert_eq!(answer_label(count_answer(3)), "3");
        assert_eq!(count_answer(MAX_COUNT), crate::net::ANSWERS - 1);
    }
}
