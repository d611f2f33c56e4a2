use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{footprints_overlap, Scene, SceneObject};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationKind {
    LeftOf,
    RightOf,
    InFrontOf,
    Behind,
    ClosestTo,
    FarthestFrom,
    Between,
    OnTopOf,
    Under,
}

impl RelationKind {
    pub const ALL: [RelationKind; 9] = [
        RelationKind::LeftOf,
        RelationKind::RightOf,
        RelationKind::InFrontOf,
        RelationKind::Behind,
        RelationKind::ClosestTo,
        RelationKind::FarthestFrom,
        RelationKind::Between,
        RelationKind::OnTopOf,
        RelationKind::Under,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::LeftOf => "left-of",
            RelationKind::RightOf => "right-of",
            RelationKind::InFrontOf => "in-front-of",
            RelationKind::Behind => "behind",
            RelationKind::ClosestTo => "closest-to",
            RelationKind::FarthestFrom => "farthest-from",
            RelationKind::Between => "between",
            RelationKind::OnTopOf => "on-top-of",
            RelationKind::Under => "under",
        }
    }

    pub fn is_view_dependent(self) -> bool {
        matches!(self, RelationKind::LeftOf | RelationKind::RightOf | RelationKind::InFrontOf | RelationKind::Behind)
    }

    pub fn num_anchors(self) -> usize {
        if self == RelationKind::Between {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RelationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown relation kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationSpec {
    pub kind: RelationKind,
    pub anchors: Vec<usize>,
}

impl RelationSpec {
    pub fn new(kind: RelationKind, anchors: Vec<usize>) -> Result<Self> {
        let spec = RelationSpec { kind, anchors };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors.len() != self.kind.num_anchors() {
            return Err(Error::Validation(format!(
                "{} takes {} anchor(s), got {}",
                self.kind,
                self.kind.num_anchors(),
                self.anchors.len()
            )));
        }
        if self.kind == RelationKind::Between && self.anchors[0] == self.anchors[1] {
            return Err(Error::Validation("between needs two distinct anchors".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Largest perpendicular distance from the anchor-to-anchor segment.
    pub between: f64,
    /// Largest vertical gap for support relations.
    pub vertical: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { between: 0.5, vertical: 0.05 }
    }
}

fn horizontal_distance(a: &SceneObject, b: &SceneObject) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

/// All objects of `candidate_class` (anchors excluded) that satisfy `rel`.
/// The result is sorted by id.
pub fn evaluate_relation(
    scene: &Scene,
    rel: &RelationSpec,
    candidate_class: &str,
    thresholds: &Thresholds,
) -> Result<Vec<usize>> {
    rel.validate()?;
    let anchors = rel
        .anchors
        .iter()
        .map(|&a| {
            scene
                .objects
                .get(a)
                .ok_or_else(|| Error::Validation(format!("anchor {a} not in scene {}", scene.scene_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let candidates: Vec<&SceneObject> = scene
        .objects
        .iter()
        .filter(|o| o.label == candidate_class && !rel.anchors.contains(&o.id))
        .collect();
    let view = scene.canonical_viewpoint();
    let right = view.right();
    let anchor = anchors[0];
    let lateral = |o: &SceneObject| {
        (o.center[0] - anchor.center[0]) * right[0] + (o.center[1] - anchor.center[1]) * right[1]
    };
    let depth = |o: &SceneObject| {
        (o.center[0] - anchor.center[0]) * view.facing[0] + (o.center[1] - anchor.center[1]) * view.facing[1]
    };
    let keep = |pred: &dyn Fn(&SceneObject) -> bool| candidates.iter().filter(|o| pred(o)).map(|o| o.id).collect();

    let out: Vec<usize> = match rel.kind {
        RelationKind::LeftOf => keep(&|o| lateral(o) < 0.0),
        RelationKind::RightOf => keep(&|o| lateral(o) > 0.0),
        RelationKind::InFrontOf => keep(&|o| depth(o) < 0.0),
        RelationKind::Behind => keep(&|o| depth(o) > 0.0),
        RelationKind::ClosestTo | RelationKind::FarthestFrom => {
            let dists: Vec<f64> = candidates.iter().map(|o| horizontal_distance(o, anchor)).collect();
            let best = if rel.kind == RelationKind::ClosestTo {
                dists.iter().copied().fold(f64::INFINITY, f64::min)
            } else {
                dists.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            candidates.iter().zip(&dists).filter(|(_, &d)| d == best).map(|(o, _)| o.id).collect()
        }
        RelationKind::Between => {
            let (a, b) = (anchors[0].center, anchors[1].center);
            let (ux, uy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = ux * ux + uy * uy;
            keep(&|o| {
                let (px, py) = (o.center[0] - a[0], o.center[1] - a[1]);
                let t = (px * ux + py * uy) / len2;
                let perp = (px * uy - py * ux).abs() / len2.sqrt();
                len2 > 0.0 && t > 0.0 && t < 1.0 && perp < thresholds.between
            })
        }
        RelationKind::OnTopOf => keep(&|o| {
            (o.bottom() - anchor.top()).abs() < thresholds.vertical && footprints_overlap(o, anchor)
        }),
        RelationKind::Under => keep(&|o| {
            (anchor.bottom() - o.top()).abs() < thresholds.vertical && footprints_overlap(o, anchor)
        }),
    };
    Ok(out)
}
