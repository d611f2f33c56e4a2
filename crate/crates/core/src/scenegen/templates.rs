use super::RelationKind;
use crate::dataset::PhraseSpan;

/// A template element: a literal word or a noun-phrase slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Piece {
    Word(&'static str),
    Target,
    Anchor1,
    Anchor2,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub kind: RelationKind,
    pub pattern: Vec<Piece>,
}

fn parse_pattern(kind: RelationKind, text: &'static str) -> Template {
    let pattern = text
        .split_whitespace()
        .map(|w| match w {
            "[TGT]" => Piece::Target,
            "[ANC1]" => Piece::Anchor1,
            "[ANC2]" => Piece::Anchor2,
            _ => Piece::Word(w),
        })
        .collect();
    Template { kind, pattern }
}

pub fn templates_for(kind: RelationKind) -> Vec<Template> {
    let texts: &[&'static str] = match kind {
        RelationKind::LeftOf => &[
            "[TGT] that is to the left of [ANC1]",
            "[TGT] on the left of [ANC1]",
            "find [TGT] left of [ANC1]",
        ],
        RelationKind::RightOf => &[
            "[TGT] that is to the right of [ANC1]",
            "[TGT] on the right of [ANC1]",
            "find [TGT] right of [ANC1]",
        ],
        RelationKind::InFrontOf => &[
            "[TGT] in front of [ANC1]",
            "[TGT] that is in front of [ANC1]",
            "choose [TGT] located in front of [ANC1]",
        ],
        RelationKind::Behind => &[
            "[TGT] behind [ANC1]",
            "[TGT] that is behind [ANC1]",
            "find [TGT] located behind [ANC1]",
        ],
        RelationKind::ClosestTo => &[
            "[TGT] closest to [ANC1]",
            "[TGT] that is nearest to [ANC1]",
            "find [TGT] which is closest to [ANC1]",
        ],
        RelationKind::FarthestFrom => &[
            "[TGT] farthest from [ANC1]",
            "[TGT] that is furthest from [ANC1]",
            "find [TGT] which is farthest from [ANC1]",
        ],
        RelationKind::Between => &[
            "[TGT] between [ANC1] and [ANC2]",
            "[TGT] that is between [ANC1] and [ANC2]",
            "find [TGT] located between [ANC1] and [ANC2]",
        ],
        RelationKind::OnTopOf => &["[TGT] on top of [ANC1]", "[TGT] that is on [ANC1]"],
        RelationKind::Under => &["[TGT] under [ANC1]", "[TGT] that is below [ANC1]"],
    };
    texts.iter().map(|t| parse_pattern(kind, t)).collect()
}

/// The words filling one slot: `the`, an optional color, and the class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotFill {
    pub object_id: usize,
    pub words: Vec<String>,
}

impl SlotFill {
    pub fn new(object_id: usize, label: &str, color: Option<&str>) -> Self {
        let mut words = vec!["the".to_string()];
        words.extend(color.map(str::to_string));
        words.push(label.to_string());
        SlotFill { object_id, words }
    }
}

/// Expands a template into tokens plus one span per slot, target first.
pub fn instantiate(template: &Template, target: &SlotFill, anchors: &[SlotFill]) -> (Vec<String>, Vec<PhraseSpan>) {
    let mut tokens = Vec::new();
    let mut target_span = None;
    let mut anchor_spans = vec![None; anchors.len()];
    for piece in &template.pattern {
        let (fill, slot) = match piece {
            Piece::Word(w) => {
                tokens.push((*w).to_string());
                continue;
            }
            Piece::Target => (target, None),
            Piece::Anchor1 => (&anchors[0], Some(0)),
            Piece::Anchor2 => (&anchors[1], Some(1)),
        };
        let start = tokens.len();
        tokens.extend(fill.words.iter().cloned());
        let span = PhraseSpan { start, end: tokens.len(), object_id: fill.object_id, is_target: slot.is_none() };
        match slot {
            None => target_span = Some(span),
            Some(i) => anchor_spans[i] = Some(span),
        }
    }
    let mut spans: Vec<PhraseSpan> = target_span.into_iter().collect();
    spans.extend(anchor_spans.into_iter().flatten());
    (tokens, spans)
}
