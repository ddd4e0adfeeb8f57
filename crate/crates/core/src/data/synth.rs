//! Procedural scenes of colored shapes, their dual-level features and
//! grammar-generated captions.
//!
//! Region vectors carry clean object identity but nothing about the
//! background; grid vectors carry the background and an area-weighted blend
//! of whatever overlaps each cell. Neither level alone holds the full caption.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{DataError, Dataset, DatasetManifest, FeatureBundle, SplitCounts, TrainExample, Vocab};
use crate::geometry::{BoundingBox, GridLayout};
use crate::numerics::Tensor;

pub const REGION_DIM: usize = 16;
pub const GRID_DIM: usize = 16;
pub const MAX_OBJECTS: usize = 6;
pub const MAX_CAPTION_WORDS: usize = 14;
pub const REFERENCES_PER_EXAMPLE: usize = 5;

const MIN_CENTER_GAP: f64 = 0.1;
const NOISE_STD: f64 = 0.05;
const SMALL_SIDE: (f64, f64) = (0.12, 0.2);
const LARGE_SIDE: (f64, f64) = (0.3, 0.42);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    /// The two interchangeable words for this size.
    pub fn synonyms(self) -> [&'static str; 2] {
        match self {
            Size::Small => ["small", "little"],
            Size::Large => ["large", "big"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub bbox: BoundingBox,
}

impl SceneObject {
    fn attributes(&self) -> [f64; 9] {
        let mut a = [0.0; 9];
        a[Shape::ALL.iter().position(|&s| s == self.shape).expect("listed")] = 1.0;
        a[3 + Color::ALL.iter().position(|&c| c == self.color).expect("listed")] = 1.0;
        a[7 + Size::ALL.iter().position(|&s| s == self.size).expect("listed")] = 1.0;
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub objects: Vec<SceneObject>,
    pub background: Color,
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

fn place(rng: &mut ChaCha8Rng, size: Size) -> BoundingBox {
    let (lo, hi) = match size {
        Size::Small => SMALL_SIDE,
        Size::Large => LARGE_SIDE,
    };
    loop {
        let w = rng.gen_range(lo..hi);
        let h = rng.gen_range(lo..hi);
        let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
        let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
        let corners = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0].map(|v| round32(v).clamp(0.0, 1.0));
        if let Ok(b) = BoundingBox::from_array(corners) {
            return b;
        }
    }
}

fn center(b: &BoundingBox) -> (f64, f64) {
    let [x, y, _, _] = b.center_form();
    (x, y)
}

/// One to six objects with distinct (shape, color, size) triples and centers
/// at least 0.1 apart.
pub fn generate_scene(rng: &mut ChaCha8Rng) -> SyntheticScene {
    let n = rng.gen_range(1..=MAX_OBJECTS);
    let mut triples: Vec<(Shape, Color, Size)> = Shape::ALL
        .iter()
        .flat_map(|&s| Color::ALL.iter().flat_map(move |&c| Size::ALL.iter().map(move |&z| (s, c, z))))
        .collect();
    triples.shuffle(rng);
    triples.truncate(n);
    let background = *Color::ALL.choose(rng).expect("non-empty");
    'restart: loop {
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        for &(shape, color, size) in &triples {
            let mut attempts = 0;
            let bbox = loop {
                attempts += 1;
                if attempts > 200 {
                    continue 'restart;
                }
                let b = place(rng, size);
                let (x, y) = center(&b);
                let clear = objects.iter().all(|o| {
                    let (ox, oy) = center(&o.bbox);
                    ((x - ox).powi(2) + (y - oy).powi(2)).sqrt() >= MIN_CENTER_GAP
                });
                if clear {
                    break b;
                }
            };
            objects.push(SceneObject { shape, color, size, bbox });
        }
        return SyntheticScene { objects, background };
    }
}

/// Region and grid features of a scene with Gaussian noise, rounded to f32.
pub fn scene_features(scene: &SyntheticScene, layout: GridLayout, rng: &mut ChaCha8Rng) -> FeatureBundle {
    let noise = Normal::new(0.0, NOISE_STD).expect("valid deviation");
    let mut jitter = |v: f64| round32(v + noise.sample(rng));

    let mut regions = Vec::with_capacity(scene.objects.len() * REGION_DIM);
    for o in &scene.objects {
        let mut row = [0.0; REGION_DIM];
        row[..9].copy_from_slice(&o.attributes());
        regions.extend(row.map(&mut jitter));
    }

    let cells = layout.cell_boxes();
    let cell_area = 1.0 / layout.len() as f64;
    let bg = Color::ALL.iter().position(|&c| c == scene.background).expect("listed");
    let mut grids = Vec::with_capacity(cells.len() * GRID_DIM);
    for cell in &cells {
        let mut row = [0.0; GRID_DIM];
        let mut coverage = 0.0;
        for o in &scene.objects {
            let frac = o.bbox.intersection_area(cell) / cell_area;
            for (r, a) in row.iter_mut().zip(o.attributes()) {
                *r += frac * a;
            }
            coverage += frac;
        }
        let coverage = f64::min(coverage, 1.0);
        row[9 + bg] = 1.0 - coverage;
        row[13] = coverage;
        grids.extend(row.map(&mut jitter));
    }

    let n = scene.objects.len();
    FeatureBundle {
        regions: Tensor::new(vec![n, REGION_DIM], regions).expect("sized"),
        grids: Tensor::new(vec![cells.len(), GRID_DIM], grids).expect("sized"),
        boxes: scene.objects.iter().map(|o| o.bbox).collect(),
        layout,
    }
}

/// Color whose one-hot slot dominates a synthetic region feature row.
pub fn region_color(row: &[f64]) -> Color {
    let slots = &row[3..7];
    let best = (0..4).fold(0, |b, i| if slots[i] > slots[b] { i } else { b });
    Color::ALL[best]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// Where `a` sits relative to `b`, along the axis of larger separation.
    fn between(a: &BoundingBox, b: &BoundingBox) -> Self {
        let (ax, ay) = center(a);
        let (bx, by) = center(b);
        let (dx, dy) = (ax - bx, ay - by);
        if dx.abs() >= dy.abs() {
            if dx < 0.0 {
                Relation::LeftOf
            } else {
                Relation::RightOf
            }
        } else if dy < 0.0 {
            Relation::Above
        } else {
            Relation::Below
        }
    }
}

/// Free choices of one caption: determiner, the two size synonyms and the
/// background phrase.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Choice {
    pub det: usize,
    pub size_first: usize,
    pub size_second: usize,
    pub background: usize,
}

impl Choice {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            det: rng.gen_range(0..2),
            size_first: rng.gen_range(0..2),
            size_second: rng.gen_range(0..2),
            background: rng.gen_range(0..3),
        }
    }
}

pub(crate) fn render(
    subject: &SceneObject,
    other: Option<(&SceneObject, Relation)>,
    background: Color,
    choice: Choice,
) -> Vec<&'static str> {
    let mut w = vec![["a", "one"][choice.det], subject.size.synonyms()[choice.size_first], subject.color.word(), subject.shape.word()];
    if let Some((o, rel)) = other {
        w.extend_from_slice(rel.words());
        w.extend(["a", o.size.synonyms()[choice.size_second], o.color.word(), o.shape.word()]);
    }
    match choice.background {
        0 => w.extend(["on", "a", background.word(), "background"]),
        1 => w.extend(["with", "a", background.word(), "background"]),
        _ => w.extend(["in", "a", background.word(), "scene"]),
    }
    w
}

/// Indices of the largest and second-largest objects by area (ties to the
/// lower index).
pub(crate) fn salient_pair(scene: &SyntheticScene) -> (usize, Option<usize>) {
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by(|&a, &b| scene.objects[b].bbox.area().total_cmp(&scene.objects[a].bbox.area()).then(a.cmp(&b)));
    (order[0], order.get(1).copied())
}

/// Five reference captions describing the largest object, its relation to
/// the second largest and the background.
pub fn caption_scene(scene: &SyntheticScene, rng: &mut ChaCha8Rng) -> Vec<Vec<&'static str>> {
    let (first, second) = salient_pair(scene);
    let subject = &scene.objects[first];
    let other = second.map(|s| {
        let o = &scene.objects[s];
        (o, Relation::between(&subject.bbox, &o.bbox))
    });
    (0..REFERENCES_PER_EXAMPLE).map(|_| render(subject, other, scene.background, Choice::sample(rng))).collect()
}

pub(crate) fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub(crate) fn generate_example(seed: u64, index: usize, layout: GridLayout, vocab: &Vocab) -> (SyntheticScene, TrainExample) {
    let mut rng = example_rng(seed, index);
    let scene = generate_scene(&mut rng);
    let features = scene_features(&scene, layout, &mut rng);
    let captions = caption_scene(&scene, &mut rng)
        .iter()
        .map(|c| vocab.encode(c).expect("grammar words are in the vocabulary"))
        .collect();
    (scene, TrainExample { features, captions })
}

/// Deterministic corpus of `n` examples split 90/5/5 by index.
pub fn generate_corpus(n: usize, seed: u64, layout: GridLayout) -> Result<Dataset, DataError> {
    if n < 10 {
        return Err(DataError::Invalid(format!("corpus needs at least 10 examples, got {n}")));
    }
    let vocab = Vocab::default();
    let mut all: Vec<TrainExample> =
        (0..n).into_par_iter().map(|i| generate_example(seed, i, layout, &vocab).1).collect();
    let n_train = n * 9 / 10;
    let n_val = n / 20;
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    let manifest = DatasetManifest {
        format: "DLDS".into(),
        version: super::DATASET_VERSION,
        seed,
        counts: SplitCounts { train: all.len(), val: val.len(), test: test.len() },
        region_dim: REGION_DIM,
        grid_dim: GRID_DIM,
        layout: layout.to_string(),
        vocab: vocab.words().to_vec(),
    };
    Ok(Dataset { manifest, train: all, val, test })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn scenes_satisfy_invariants() {
        let mut counts = [0usize; MAX_OBJECTS + 1];
        for i in 0..10_000 {
            let mut rng = example_rng(11, i);
            let s = generate_scene(&mut rng);
            assert!((1..=MAX_OBJECTS).contains(&s.objects.len()));
            counts[s.objects.len()] += 1;
            let mut triples = BTreeSet::new();
            for (a, o) in s.objects.iter().enumerate() {
                let [x0, y0, x1, y1] = o.bbox.corners();
                assert!(0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0);
                assert!(triples.insert((o.shape as u8, o.color as u8, o.size as u8)));
                for b in &s.objects[a + 1..] {
                    let ((ax, ay), (bx, by)) = (center(&o.bbox), center(&b.bbox));
                    assert!(((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() >= MIN_CENTER_GAP);
                }
            }
        }
        assert!(counts[1..].iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn exhaustive_grammar_bounds() {
        let mut words = BTreeSet::new();
        let mut longest = 0;
        let bbox = BoundingBox::new(0.1, 0.1, 0.3, 0.3).unwrap();
        let objects: Vec<SceneObject> = Shape::ALL
            .iter()
            .flat_map(|&shape| Color::ALL.iter().flat_map(move |&color| Size::ALL.iter().map(move |&size| (shape, color, size))))
            .map(|(shape, color, size)| SceneObject { shape, color, size, bbox })
            .collect();
        let relations = [None, Some(Relation::LeftOf), Some(Relation::RightOf), Some(Relation::Above), Some(Relation::Below)];
        for s in &objects {
            for o in &objects {
                for rel in relations {
                    for bg in Color::ALL {
                        for det in 0..2 {
                            for size_first in 0..2 {
                                for size_second in 0..2 {
                                    for background in 0..3 {
                                        let c = Choice { det, size_first, size_second, background };
                                        let w = render(s, rel.map(|r| (o, r)), bg, c);
                                        longest = longest.max(w.len());
                                        words.extend(w);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(longest, MAX_CAPTION_WORDS);
        assert_eq!(words.len(), super::super::WORDS.len());
        assert!(words.len() + 3 <= 40);
        let listed: BTreeSet<&str> = super::super::WORDS.iter().copied().collect();
        assert_eq!(words, listed);
    }

    #[test]
    fn mentioned_attributes_identify_one_region() {
        let layout = GridLayout::new(4, 4).unwrap();
        let vocab = Vocab::default();
        for i in 0..500 {
            let (scene, ex) = generate_example(3, i, layout, &vocab);
            let (first, _) = salient_pair(&scene);
            let s = &scene.objects[first];
            for cap in &ex.captions {
                let words = vocab.decode(cap);
                assert!(words.contains(&s.color.word().to_string()));
                assert!(words[..4].contains(&s.shape.word().to_string()));
            }
            // exactly one region carries the subject's attribute triple
            let hits = scene
                .objects
                .iter()
                .filter(|o| o.shape == s.shape && o.color == s.color && o.size == s.size)
                .count();
            assert_eq!(hits, 1);
            // and its feature row has the strongest color channel for that color
            let c = 3 + Color::ALL.iter().position(|&c| c == s.color).unwrap();
            let row = &ex.features.regions.data()[first * REGION_DIM..(first + 1) * REGION_DIM];
            let best = (3..7).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(best, c);
        }
    }

    #[test]
    fn relation_follows_dominant_axis() {
        let a = BoundingBox::new(0.0, 0.0, 0.2, 0.2).unwrap();
        let b = BoundingBox::new(0.5, 0.1, 0.7, 0.3).unwrap();
        assert_eq!(Relation::between(&a, &b), Relation::LeftOf);
        assert_eq!(Relation::between(&b, &a), Relation::RightOf);
        let c = BoundingBox::new(0.05, 0.6, 0.25, 0.8).unwrap();
        assert_eq!(Relation::between(&a, &c), Relation::Above);
        assert_eq!(Relation::between(&c, &a), Relation::Below);
    }

    #[test]
    fn corpus_split_and_determinism() {
        let layout = GridLayout::new(4, 4).unwrap();
        let a = generate_corpus(200, 5, layout).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (180, 10, 10));
        assert_eq!(a, generate_corpus(200, 5, layout).unwrap());
        assert_ne!(a.train[0], generate_corpus(200, 6, layout).unwrap().train[0]);
        assert!(generate_corpus(9, 5, layout).is_err());
        let mut boxes: Vec<_> = a.train.iter().chain(&a.val).chain(&a.test).map(|e| format!("{:?}", e.features.boxes)).collect();
        boxes.sort();
        boxes.dedup();
        assert_eq!(boxes.len(), 200);
    }

    #[test]
    fn region_color_reads_back_the_noisy_attribute() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let scene = generate_scene(&mut rng);
            let f = scene_features(&scene, GridLayout::new(4, 4).unwrap(), &mut rng);
            for (i, o) in scene.objects.iter().enumerate() {
                let row = &f.regions.data()[i * REGION_DIM..(i + 1) * REGION_DIM];
                assert_eq!(region_color(row), o.color);
            }
        }
    }
}
