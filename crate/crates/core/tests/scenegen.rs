use std::collections::HashSet;

use pag_core::dataset::{parse_target_phrase, validate_spans};
use pag_core::scenegen::{
    evaluate_relation, generate_corpus, generate_description, generate_scene, sample_points, CorpusConfig,
    RelationKind, RelationSpec, Scene, SceneConfig, SceneObject, Thresholds,
};
use proptest::prelude::*;

fn overlap_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> bool {
    a0.max(b0) < a1.min(b1)
}

fn boxes_overlap(a: &SceneObject, b: &SceneObject) -> bool {
    (0..2).all(|d| {
        overlap_1d(
            a.center[d] - a.size[d] / 2.0,
            a.center[d] + a.size[d] / 2.0,
            b.center[d] - b.size[d] / 2.0,
            b.center[d] + b.size[d] / 2.0,
        )
    })
}

#[test]
fn thousand_scenes_have_no_overlaps() {
    let cfg = SceneConfig::default();
    for seed in 0..1000 {
        let s = generate_scene(&cfg, seed).unwrap();
        for i in 0..s.objects.len() {
            for j in i + 1..s.objects.len() {
                assert!(!boxes_overlap(&s.objects[i], &s.objects[j]), "seed {seed}: {i} vs {j}");
            }
        }
    }
}

/// Pointwise restatement of each predicate, written against raw coordinates.
fn oracle(scene: &Scene, kind: RelationKind, anchors: &[usize], class: &str) -> Vec<usize> {
    let a = &scene.objects[anchors[0]];
    let cands: Vec<&SceneObject> =
        scene.objects.iter().filter(|o| o.label == class && !anchors.contains(&o.id)).collect();
    let dist = |o: &SceneObject| ((o.center[0] - a.center[0]).powi(2) + (o.center[1] - a.center[1]).powi(2)).sqrt();
    let mut out = Vec::new();
    for o in &cands {
        let dx = o.center[0] - a.center[0];
        let dy = o.center[1] - a.center[1];
        let ok = match kind {
            RelationKind::LeftOf => dx < 0.0,
            RelationKind::RightOf => dx > 0.0,
            RelationKind::InFrontOf => dy < 0.0,
            RelationKind::Behind => dy > 0.0,
            RelationKind::ClosestTo => cands.iter().all(|c| dist(o) <= dist(c)),
            RelationKind::FarthestFrom => cands.iter().all(|c| dist(o) >= dist(c)),
            RelationKind::Between => {
                let b = &scene.objects[anchors[1]];
                let (ux, uy) = (b.center[0] - a.center[0], b.center[1] - a.center[1]);
                let len = (ux * ux + uy * uy).sqrt();
                let t = (dx * ux + dy * uy) / (len * len);
                let perp = (dx * uy - dy * ux).abs() / len;
                t > 0.0 && t < 1.0 && perp < 0.5
            }
            RelationKind::OnTopOf => {
                let gap = (o.center[2] - o.size[2] / 2.0) - (a.center[2] + a.size[2] / 2.0);
                gap.abs() < 0.05 && boxes_overlap(o, a)
            }
            RelationKind::Under => {
                let gap = (a.center[2] - a.size[2] / 2.0) - (o.center[2] + o.size[2] / 2.0);
                gap.abs() < 0.05 && boxes_overlap(o, a)
            }
        };
        if ok {
            out.push(o.id);
        }
    }
    out.sort_unstable();
    out
}

#[test]
fn relations_match_pointwise_oracle() {
    let t = Thresholds::default();
    for seed in 0..200 {
        let s = generate_scene(&SceneConfig::default(), seed).unwrap();
        let classes: HashSet<&str> = s.objects.iter().map(|o| o.label.as_str()).collect();
        let m = s.objects.len();
        for kind in RelationKind::ALL {
            for a in 0..m {
                let anchor_sets: Vec<Vec<usize>> = if kind == RelationKind::Between {
                    (0..m).filter(|&b| b != a).map(|b| vec![a, b]).collect()
                } else {
                    vec![vec![a]]
                };
                for anchors in anchor_sets {
                    let spec = RelationSpec::new(kind, anchors.clone()).unwrap();
                    for class in &classes {
                        assert_eq!(
                            evaluate_relation(&s, &spec, class, &t).unwrap(),
                            oracle(&s, kind, &anchors, class),
                            "seed {seed} {kind} {anchors:?} {class}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn corpus_samples_are_unique_and_well_formed() {
    let mut cfg = CorpusConfig::new(400, 10_000, 7);
    cfg.hard_frac = Some(0.3);
    cfg.viewdep_frac = Some(0.4);
    let corpus = generate_corpus(&cfg).unwrap();
    assert_eq!(corpus.samples.len(), 10_000);
    let classes: HashSet<String> = cfg.scene.class_names().into_iter().collect();
    let mut parsed_ok = 0;
    let mut phrases = 0;
    let mut shared_class_anchors = 0;
    for (sample, triple) in corpus.samples.iter().zip(&corpus.triples) {
        let scene = corpus.scene(&sample.scene_id).unwrap();
        sample.validate_against(scene).unwrap();
        validate_spans(&sample.phrases, sample.tokens.len()).unwrap();
        let sol = oracle(scene, triple.relation.kind, &triple.relation.anchors, &triple.target_class);
        assert_eq!(sol, vec![sample.target_id], "{}", sample.sample_id);
        let k = sample.phrases.len();
        assert_eq!(k, 1 + triple.relation.kind.num_anchors());
        phrases += k;
        for p in sample.phrases.iter().filter(|p| !p.is_target) {
            let words = &sample.tokens[p.start..p.end];
            let named: Vec<usize> = scene
                .objects
                .iter()
                .filter(|o| words.last() == Some(&o.label) && words.iter().all(|w| w == "the" || *w == o.label || *w == o.color))
                .map(|o| o.id)
                .collect();
            assert_eq!(named, vec![p.object_id], "{}: {words:?}", sample.sample_id);
            shared_class_anchors += (scene.class_count(&scene.objects[p.object_id].label) > 1) as usize;
        }
        let tgt = sample.target_span().unwrap();
        if parse_target_phrase(&sample.tokens, &classes) == Some((tgt.start, tgt.end)) {
            parsed_ok += 1;
        }
    }
    let f = corpus.tag_fractions();
    assert!((f.hard - 0.3).abs() <= 0.02, "hard {}", f.hard);
    assert!((f.view_dep - 0.4).abs() <= 0.02, "view_dep {}", f.view_dep);
    let pps = phrases as f64 / corpus.samples.len() as f64;
    assert!((2.0..=3.0).contains(&pps));
    assert!(parsed_ok as f64 >= 0.99 * corpus.samples.len() as f64, "parsed {parsed_ok}");
    // Some anchors share their class and are only told apart by color.
    assert!(shared_class_anchors > 1000, "{shared_class_anchors}");
}

#[test]
fn corpus_is_deterministic_and_split_by_scene() {
    let cfg = CorpusConfig::new(50, 300, 3);
    let a = generate_corpus(&cfg).unwrap();
    let b = generate_corpus(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.split.train.len(), 40);
    assert_eq!(a.split.val.len(), 10);
    let train: HashSet<&String> = a.split.train.iter().collect();
    assert!(a.split.val.iter().all(|v| !train.contains(v)));
    assert_eq!(a.samples[0].sample_id, "s000000");
    assert_eq!(a.scenes[0].scene_id, "scene00000");
}

#[test]
fn description_from_seed_is_deterministic() {
    let s = generate_scene(&SceneConfig::default(), 5).unwrap();
    assert_eq!(generate_description(&s, 9), generate_description(&s, 9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scenes_respect_bounds(seed in any::<u64>(), m in 8usize..=24) {
        let s = generate_scene(&SceneConfig::with_objects(m, m), seed).unwrap();
        prop_assert_eq!(s.objects.len(), m);
        for (i, o) in s.objects.iter().enumerate() {
            prop_assert_eq!(o.id, i);
            prop_assert!(o.size.iter().all(|&x| x > 0.0));
            let [x0, x1, y0, y1] = o.footprint();
            prop_assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= s.room[0] && y1 <= s.room[1]);
        }
    }

    #[test]
    fn closest_is_singleton_for_distinct_distances(seed in any::<u64>()) {
        let s = generate_scene(&SceneConfig::default(), seed).unwrap();
        let t = Thresholds::default();
        let anchor = 0;
        let class = s.objects.iter().find(|o| o.id != anchor && o.label != s.objects[anchor].label).map(|o| o.label.clone());
        if let Some(class) = class {
            let spec = RelationSpec::new(RelationKind::ClosestTo, vec![anchor]).unwrap();
            prop_assert_eq!(evaluate_relation(&s, &spec, &class, &t).unwrap().len(), 1);
        }
    }

    #[test]
    fn points_stay_near_box(seed in any::<u64>(), n in 8usize..200) {
        let s = generate_scene(&SceneConfig::with_objects(8, 8), seed).unwrap();
        for o in &s.objects {
            let pts = sample_points(o, n).unwrap();
            let sigma = 0.01 * o.size.iter().cloned().fold(f64::INFINITY, f64::min);
            for r in 0..n {
                for d in 0..3 {
                    prop_assert!((pts.row(r)[d] as f64 - o.center[d]).abs() <= o.size[d] / 2.0 + 6.0 * sigma + 1e-4);
                }
            }
        }
    }
}
