//! Deterministic synthetic scenes and templated referring sentences whose
//! phrase annotations are exact by construction.

mod corpus;
mod describe;
mod points;
mod relations;
mod templates;

use serde::{Deserialize, Serialize};

use crate::dataset::M_MAX;
use crate::error::{Error, Result};
use crate::nn::Rng;

pub use corpus::{generate_corpus, tag_fractions, Corpus, CorpusConfig, TagFractions};
pub use describe::{
    anchor_naming, classify_sample, enumerate_triples, generate_description, generate_description_with, TagFilter, Triple,
};
pub use points::sample_points;
pub use relations::{evaluate_relation, RelationKind, RelationSpec, Thresholds};
pub use templates::{instantiate, templates_for, Piece, SlotFill, Template};

/// One object proposal: an axis-aligned box with a class and a color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub label: String,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub color: String,
    pub point_seed: u64,
}

impl SceneObject {
    /// Horizontal footprint `[xmin, xmax, ymin, ymax]`.
    pub fn footprint(&self) -> [f64; 4] {
        let [cx, cy, _] = self.center;
        let [sx, sy, _] = self.size;
        [cx - sx / 2.0, cx + sx / 2.0, cy - sy / 2.0, cy + sy / 2.0]
    }

    pub fn bottom(&self) -> f64 {
        self.center[2] - self.size[2] / 2.0
    }

    pub fn top(&self) -> f64 {
        self.center[2] + self.size[2] / 2.0
    }

    /// Center followed by size, the box encoding fed to the model.
    pub fn box6(&self) -> [f64; 6] {
        let [x, y, z] = self.center;
        let [a, b, c] = self.size;
        [x, y, z, a, b, c]
    }
}

/// True when two footprints share a region of positive area.
pub fn footprints_overlap(a: &SceneObject, b: &SceneObject) -> bool {
    let [ax0, ax1, ay0, ay1] = a.footprint();
    let [bx0, bx1, by0, by1] = b.footprint();
    ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1
}

/// The fixed observer used by view-dependent relations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewpoint {
    pub position: [f64; 2],
    pub facing: [f64; 2],
}

impl Viewpoint {
    /// Unit vector pointing to the observer's right.
    pub fn right(&self) -> [f64; 2] {
        [self.facing[1], -self.facing[0]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    /// Width (x), depth (y) and height (z) in meters.
    pub room: [f64; 3],
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Standing at the middle of the entrance wall (`y = 0`), facing `+y`.
    pub fn canonical_viewpoint(&self) -> Viewpoint {
        Viewpoint { position: [self.room[0] / 2.0, 0.0], facing: [0.0, 1.0] }
    }

    pub fn class_count(&self, label: &str) -> usize {
        self.objects.iter().filter(|o| o.label == label).count()
    }
}

/// An object class with its prototypical extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub size: [f64; 3],
}

pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.2, 0.7, 0.25]),
    ("blue", [0.2, 0.3, 0.85]),
    ("yellow", [0.9, 0.85, 0.2]),
    ("black", [0.08, 0.08, 0.08]),
    ("white", [0.95, 0.95, 0.95]),
    ("brown", [0.5, 0.32, 0.15]),
    ("gray", [0.5, 0.5, 0.5]),
];

pub fn color_rgb(name: &str) -> Option<[f32; 3]> {
    COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

pub fn default_classes() -> Vec<ClassSpec> {
    const TABLE: [(&str, [f64; 3]); 20] = [
        ("chair", [0.5, 0.5, 0.9]),
        ("table", [1.0, 1.0, 0.75]),
        ("monitor", [0.6, 0.2, 0.45]),
        ("door", [0.9, 0.1, 2.0]),
        ("cabinet", [0.8, 0.5, 1.2]),
        ("bed", [1.6, 2.0, 0.6]),
        ("sofa", [2.0, 0.9, 0.8]),
        ("desk", [1.4, 0.7, 0.75]),
        ("lamp", [0.3, 0.3, 1.6]),
        ("shelf", [1.0, 0.35, 1.8]),
        ("window", [1.2, 0.1, 1.2]),
        ("toilet", [0.4, 0.7, 0.8]),
        ("sink", [0.6, 0.5, 0.9]),
        ("bathtub", [1.7, 0.8, 0.6]),
        ("dresser", [1.2, 0.5, 1.0]),
        ("nightstand", [0.5, 0.4, 0.6]),
        ("bin", [0.35, 0.35, 0.5]),
        ("plant", [0.4, 0.4, 1.0]),
        ("tv", [1.1, 0.15, 0.7]),
        ("box", [0.4, 0.4, 0.4]),
    ];
    TABLE.iter().map(|(n, s)| ClassSpec { name: n.to_string(), size: *s }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: Vec<ClassSpec>,
    /// Largest number of instances of one class.
    pub max_repeat: usize,
    /// Relative jitter applied to each prototype extent.
    pub size_jitter: f64,
    /// Minimum horizontal gap between boxes.
    pub margin: f64,
    pub room_height: f64,
    pub placement_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            min_objects: 8,
            max_objects: 16,
            classes: default_classes(),
            max_repeat: 4,
            size_jitter: 0.1,
            margin: 0.05,
            room_height: 3.0,
            placement_attempts: 10_000,
        }
    }
}

impl SceneConfig {
    pub fn with_objects(min: usize, max: usize) -> Self {
        SceneConfig { min_objects: min, max_objects: max, ..Default::default() }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 3 || self.min_objects > self.max_objects || self.max_objects > M_MAX {
            return Err(Error::Config(format!(
                "object range {}..={} must satisfy 3 <= min <= max <= {M_MAX}",
                self.min_objects, self.max_objects
            )));
        }
        if self.classes.len() < 3 {
            return Err(Error::Config("at least three classes are required".into()));
        }
        if self.max_repeat < 2 {
            return Err(Error::Config("max_repeat must be at least 2".into()));
        }
        Ok(())
    }
}

/// Rounds to the 6-decimal grid used by the JSONL files so that a scene and
/// its serialized form describe identical geometry.
pub(crate) fn quantize(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Rounds to an even number of micrometers so that half extents stay on the
/// 6-decimal grid as well.
fn quantize_even(x: f64) -> f64 {
    (x * 5e5).round() / 5e5
}

/// Draws class instance counts: one or two repeated classes (so that
/// same-class distractors exist) and distinct singletons for the rest.
fn assign_classes(config: &SceneConfig, m: usize, rng: &mut Rng) -> Vec<usize> {
    let n_classes = config.classes.len();
    let mut order: Vec<usize> = (0..n_classes).collect();
    rng.shuffle(&mut order);
    let repeated = if m >= 7 && rng.bernoulli(0.5) { 2 } else { 1 };
    let mut counts = vec![0usize; n_classes];
    let mut used = 0;
    for &c in order.iter().take(repeated) {
        let k = 2 + rng.below(config.max_repeat - 1);
        // Keep room for at least two singleton classes to act as anchors.
        let k = k.min(m.saturating_sub(used + 2)).max(2);
        counts[c] = k;
        used += k;
    }
    let singles: Vec<usize> = order[repeated..].to_vec();
    let mut i = 0;
    while used < m {
        if i < singles.len() {
            counts[singles[i]] = 1;
            i += 1;
        } else {
            // Vocabulary exhausted: grow the repeated classes.
            counts[order[used % repeated]] += 1;
        }
        used += 1;
    }
    let mut labels = Vec::with_capacity(m);
    for (c, &k) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(c, k));
    }
    rng.shuffle(&mut labels);
    labels
}

/// Rejection-samples a room of non-overlapping boxes.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = Rng::derive(seed, 0x5ce7e);
    let m = config.min_objects + rng.below(config.max_objects - config.min_objects + 1);
    let labels = assign_classes(config, m, &mut rng);
    let width = quantize(rng.range(4.0 + 0.15 * m as f64, 6.0 + 0.2 * m as f64));
    let depth = quantize(rng.range(4.0 + 0.15 * m as f64, 6.0 + 0.2 * m as f64));
    let room = [width, depth, config.room_height];

    // Draw extents and appearance first, then place the largest footprints
    // first so small objects fill the remaining gaps.
    let mut protos: Vec<(usize, [f64; 3], String, u64)> = labels
        .iter()
        .map(|&c| {
            let size = config.classes[c]
                .size
                .map(|s| quantize_even(s * rng.range(1.0 - config.size_jitter, 1.0 + config.size_jitter)));
            let color = COLORS[rng.below(COLORS.len())].0.to_string();
            (c, size, color, rng.next_u64())
        })
        .collect();
    protos.sort_by(|a, b| (b.1[0] * b.1[1]).total_cmp(&(a.1[0] * a.1[1])));

    for (c, size, _, _) in &protos {
        if size[0] + 2.0 * config.margin >= width || size[1] + 2.0 * config.margin >= depth {
            return Err(Error::Generation(format!("{} does not fit in the room", config.classes[*c].name)));
        }
    }
    // A layout that gets stuck is discarded and started over.
    let per_object = (config.placement_attempts / 20).max(1);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(m);
    let mut attempts = 0usize;
    let mut tries = 0usize;
    while objects.len() < m {
        let (c, size, color, point_seed) = &protos[objects.len()];
        attempts += 1;
        tries += 1;
        if attempts > config.placement_attempts {
            return Err(Error::Generation(format!(
                "could not place {m} objects in a {width:.2}x{depth:.2} room within {} attempts",
                config.placement_attempts
            )));
        }
        if tries > per_object {
            objects.clear();
            tries = 0;
            continue;
        }
        let half = [size[0] / 2.0 + config.margin, size[1] / 2.0 + config.margin];
        let cx = quantize(rng.range(half[0], width - half[0]));
        let cy = quantize(rng.range(half[1], depth - half[1]));
        let candidate = SceneObject {
            id: 0,
            label: config.classes[*c].name.clone(),
            center: [cx, cy, size[2] / 2.0],
            size: *size,
            color: color.clone(),
            point_seed: *point_seed,
        };
        let clear = objects.iter().all(|o| {
            let [ax0, ax1, ay0, ay1] = candidate.footprint();
            let [bx0, bx1, by0, by1] = o.footprint();
            let g = config.margin;
            ax1 + g <= bx0 || bx1 + g <= ax0 || ay1 + g <= by0 || by1 + g <= ay0
        });
        if clear {
            objects.push(candidate);
            tries = 0;
        }
    }
    rng.shuffle(&mut objects);
    for (id, o) in objects.iter_mut().enumerate() {
        o.id = id;
    }
    Ok(Scene { scene_id: format!("scene{seed:06}"), room, objects })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let c = SceneConfig::default();
        assert_eq!(generate_scene(&c, 11).unwrap(), generate_scene(&c, 11).unwrap());
        assert_ne!(generate_scene(&c, 11).unwrap(), generate_scene(&c, 12).unwrap());
    }

    #[test]
    fn exact_object_count_and_ambiguity() {
        let c = SceneConfig::with_objects(8, 8);
        for seed in 0..50 {
            let s = generate_scene(&c, seed).unwrap();
            assert_eq!(s.objects.len(), 8);
            assert!(s.objects.iter().any(|o| s.class_count(&o.label) >= 2));
            assert!(s.objects.iter().all(|o| o.size.iter().all(|&x| x > 0.0)));
        }
    }

    #[test]
    fn boxes_inside_room() {
        let c = SceneConfig::with_objects(16, 24);
        for seed in 0..50 {
            let s = generate_scene(&c, seed).unwrap();
            for o in &s.objects {
                let [x0, x1, y0, y1] = o.footprint();
                assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= s.room[0] && y1 <= s.room[1]);
                assert!(o.bottom() >= -1e-9 && o.top() <= s.room[2]);
            }
        }
    }

    #[test]
    fn tiny_attempt_budget_fails_cleanly() {
        let c = SceneConfig { placement_attempts: 3, ..SceneConfig::with_objects(24, 24) };
        assert!(matches!(generate_scene(&c, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn viewpoint_right_is_plus_x() {
        let s = generate_scene(&SceneConfig::default(), 0).unwrap();
        assert_eq!(s.canonical_viewpoint().right(), [1.0, -0.0]);
    }
}
