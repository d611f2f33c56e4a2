use std::collections::BTreeSet;

use super::templates::SlotFill;
use super::{evaluate_relation, instantiate, templates_for, RelationKind, RelationSpec, Scene, Thresholds};
use crate::dataset::{GroundingSample, Tags};
use crate::nn::Rng;

/// A relation that singles out exactly one object of `target_class`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub target_class: String,
    pub relation: RelationSpec,
    pub target_id: usize,
}

/// Restricts description sampling to given tag values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TagFilter {
    pub hard: Option<bool>,
    pub view_dep: Option<bool>,
}

impl TagFilter {
    pub fn exact(tags: Tags) -> Self {
        TagFilter { hard: Some(tags.hard), view_dep: Some(tags.view_dep) }
    }

    fn accepts(&self, tags: Tags) -> bool {
        self.hard.is_none_or(|h| h == tags.hard) && self.view_dep.is_none_or(|v| v == tags.view_dep)
    }
}

pub fn classify_sample(scene: &Scene, sample: &GroundingSample, relation: RelationKind) -> Tags {
    let label = &scene.objects[sample.target_id].label;
    Tags { hard: scene.class_count(label) > 2, view_dep: relation.is_view_dependent() }
}

fn triple_tags(scene: &Scene, triple: &Triple) -> Tags {
    Tags {
        hard: scene.class_count(&triple.target_class) > 2,
        view_dep: triple.relation.kind.is_view_dependent(),
    }
}

/// How an object can be named unambiguously: `Some(false)` by its class
/// alone, `Some(true)` only together with its color, `None` not at all.
pub fn anchor_naming(scene: &Scene, id: usize) -> Option<bool> {
    let o = &scene.objects[id];
    if scene.class_count(&o.label) == 1 {
        return Some(false);
    }
    let same = scene.objects.iter().filter(|p| p.label == o.label && p.color == o.color).count();
    (same == 1).then_some(true)
}

/// Every uniquely-referring triple. Anchors are objects that
/// [`anchor_naming`] can name, so an anchor phrase is itself unambiguous.
pub fn enumerate_triples(scene: &Scene, thresholds: &Thresholds) -> Vec<Triple> {
    let classes: BTreeSet<&str> = scene.objects.iter().map(|o| o.label.as_str()).collect();
    let anchors: Vec<usize> = scene.objects.iter().filter(|o| anchor_naming(scene, o.id).is_some()).map(|o| o.id).collect();
    let mut out = Vec::new();
    for class in classes {
        let mut try_spec = |spec: RelationSpec| {
            if let Ok(ids) = evaluate_relation(scene, &spec, class, thresholds) {
                if let [id] = ids[..] {
                    out.push(Triple { target_class: class.to_string(), relation: spec, target_id: id });
                }
            }
        };
        for kind in RelationKind::ALL {
            if kind.num_anchors() == 1 {
                for &a in &anchors {
                    if scene.objects[a].label != class {
                        try_spec(RelationSpec { kind, anchors: vec![a] });
                    }
                }
            } else {
                for (i, &a) in anchors.iter().enumerate() {
                    for &b in &anchors[i + 1..] {
                        if scene.objects[a].label != class && scene.objects[b].label != class {
                            try_spec(RelationSpec { kind, anchors: vec![a, b] });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Probability that a slot mentions the object's color.
const COLOR_PROB: f64 = 0.3;

/// Samples a uniquely-referring sentence whose tags pass `filter`, or `None`
/// when the scene has no such triple.
pub fn generate_description_with(
    scene: &Scene,
    rng: &mut Rng,
    filter: TagFilter,
    thresholds: &Thresholds,
) -> Option<(GroundingSample, Triple)> {
    let triples = enumerate_triples(scene, thresholds);
    describe_from(scene, &triples, rng, filter)
}

/// True when some triple in `triples` passes `filter`.
pub(crate) fn any_accepted(scene: &Scene, triples: &[Triple], filter: TagFilter) -> bool {
    triples.iter().any(|t| filter.accepts(triple_tags(scene, t)))
}

/// Draws uniformly among the accepted triples of a precomputed list.
pub(crate) fn describe_from(
    scene: &Scene,
    triples: &[Triple],
    rng: &mut Rng,
    filter: TagFilter,
) -> Option<(GroundingSample, Triple)> {
    let accepted: Vec<&Triple> = triples.iter().filter(|t| filter.accepts(triple_tags(scene, t))).collect();
    let triple = (*rng.choose(&accepted)?).clone();
    let templates = templates_for(triple.relation.kind);
    let template = rng.choose(&templates)?;
    let mut fill = |id: usize, needs_color: bool| {
        let o = &scene.objects[id];
        let color = (needs_color || rng.bernoulli(COLOR_PROB)).then_some(o.color.as_str());
        SlotFill::new(id, &o.label, color)
    };
    let target = fill(triple.target_id, false);
    let anchors: Vec<SlotFill> =
        triple.relation.anchors.iter().map(|&a| fill(a, anchor_naming(scene, a) == Some(true))).collect();
    let (tokens, phrases) = instantiate(template, &target, &anchors);
    let mut sample = GroundingSample {
        sample_id: String::new(),
        scene_id: scene.scene_id.clone(),
        tokens,
        target_id: triple.target_id,
        phrases,
        tags: Tags::default(),
    };
    sample.tags = classify_sample(scene, &sample, triple.relation.kind);
    Some((sample, triple))
}

/// Unfiltered sampling with a fresh generator derived from `seed`.
pub fn generate_description(scene: &Scene, seed: u64) -> Option<GroundingSample> {
    let mut rng = Rng::derive(seed, 0xde5c);
    let (mut sample, _) = generate_description_with(scene, &mut rng, TagFilter::default(), &Thresholds::default())?;
    sample.sample_id = format!("{}-{seed}", scene.scene_id);
    Some(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneConfig, SceneObject};

    fn obj(id: usize, label: &str, x: f64, y: f64) -> SceneObject {
        SceneObject {
            id,
            label: label.into(),
            center: [x, y, 0.4],
            size: [0.5, 0.5, 0.8],
            color: "brown".into(),
            point_seed: id as u64,
        }
    }

    #[test]
    fn forced_cabinet_behind_door() {
        let scene = Scene {
            scene_id: "s".into(),
            room: [6.0, 6.0, 3.0],
            objects: vec![obj(0, "door", 3.0, 1.0), obj(1, "cabinet", 3.0, 4.0)],
        };
        let mut rng = Rng::new(0);
        let filter = TagFilter { hard: None, view_dep: Some(true) };
        for _ in 0..20 {
            let (s, t) = generate_description_with(&scene, &mut rng, filter, &Thresholds::default()).unwrap();
            if t.relation.kind == RelationKind::Behind && s.target_id == 1 {
                let anchor = s.phrases[1];
                assert_eq!(anchor.object_id, 0);
                assert_eq!(*s.tokens[anchor.tokens()].last().unwrap(), "door");
                return;
            }
        }
        panic!("behind triple never drawn");
    }

    #[test]
    fn hardness_boundary() {
        let mut objects = vec![obj(0, "door", 1.0, 1.0), obj(1, "chair", 2.0, 2.0), obj(2, "chair", 3.0, 3.0)];
        let scene = Scene { scene_id: "s".into(), room: [6.0, 6.0, 3.0], objects: objects.clone() };
        let sample = GroundingSample {
            sample_id: "x".into(),
            scene_id: "s".into(),
            tokens: vec!["the".into(), "chair".into()],
            target_id: 1,
            phrases: vec![],
            tags: Tags::default(),
        };
        assert!(!classify_sample(&scene, &sample, RelationKind::ClosestTo).hard);
        assert!(!classify_sample(&scene, &sample, RelationKind::ClosestTo).view_dep);
        objects.push(obj(3, "chair", 4.0, 4.0));
        let scene = Scene { objects, ..scene };
        assert!(classify_sample(&scene, &sample, RelationKind::ClosestTo).hard);
        assert!(classify_sample(&scene, &sample, RelationKind::LeftOf).view_dep);
    }

    #[test]
    fn emitted_triples_are_unique() {
        let t = Thresholds::default();
        for seed in 0..30 {
            let scene = generate_scene(&SceneConfig::default(), seed).unwrap();
            for tr in enumerate_triples(&scene, &t) {
                assert_eq!(evaluate_relation(&scene, &tr.relation, &tr.target_class, &t).unwrap(), vec![tr.target_id]);
            }
            let s = generate_description(&scene, seed).unwrap();
            s.validate_against(&scene).unwrap();
        }
    }
}
