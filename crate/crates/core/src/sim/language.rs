//! Templated instructions, synonym paraphrases and static scene captions.

use super::{
    object_name, relation_holds, type_by_name, Direction, Relation, SimState, TaskSpec, GRID_H,
    GRID_W,
};
use crate::rng::SeedRng;

pub const NUM_PARAPHRASES: usize = 5;

/// Word -> two synonyms. Index 0 and 1 are used by the variant schedule.
const SYNONYMS: &[(&str, [&str; 2])] = &[
    ("put", ["place", "set"]),
    ("place", ["set", "position"]),
    ("move", ["push", "slide"]),
    ("on", ["onto", "atop"]),
    ("pepper", ["capsicum", "chili"]),
    ("pan", ["skillet", "wok"]),
    ("knife", ["blade", "cutter"]),
    ("cloth", ["rag", "fabric"]),
    ("pot", ["saucepan", "kettle"]),
    ("mushroom", ["fungus", "champignon"]),
    ("spoon", ["ladle", "scoop"]),
    ("towel", ["napkin", "washcloth"]),
];

fn synonyms(word: &str) -> Option<&'static [&'static str; 2]> {
    SYNONYMS.iter().find(|(w, _)| *w == word).map(|(_, s)| s)
}

/// Canonical instruction for a task.
pub fn make_instruction(task: &TaskSpec) -> String {
    match *task {
        TaskSpec::PlaceOn { subject, target } => {
            format!("put the {} on the {}", object_name(subject), object_name(target))
        }
        TaskSpec::MoveDir { subject, dir } => {
            format!("move the {} to the {}", object_name(subject), dir.word())
        }
        TaskSpec::MoveRelative {
            subject,
            reference,
            relation,
        } => format!(
            "place the {} {} the {}",
            object_name(subject),
            relation.phrase(),
            object_name(reference)
        ),
    }
}

/// Inverse of [`make_instruction`] for canonical strings.
pub fn parse_instruction(s: &str) -> Option<TaskSpec> {
    let w: Vec<&str> = s.split_whitespace().collect();
    match w.as_slice() {
        ["put", "the", subj, "on", "the", tgt] => Some(TaskSpec::PlaceOn {
            subject: type_by_name(subj)?,
            target: type_by_name(tgt)?,
        }),
        ["move", "the", subj, "to", "the", dir] => Some(TaskSpec::MoveDir {
            subject: type_by_name(subj)?,
            dir: Direction::ALL.into_iter().find(|d| d.word() == *dir)?,
        }),
        ["place", "the", subj, "next", "to", "the", r] => Some(TaskSpec::MoveRelative {
            subject: type_by_name(subj)?,
            reference: type_by_name(r)?,
            relation: Relation::NextTo,
        }),
        ["place", "the", subj, "in", "front", "of", "the", r] => Some(TaskSpec::MoveRelative {
            subject: type_by_name(subj)?,
            reference: type_by_name(r)?,
            relation: Relation::InFrontOf,
        }),
        _ => None,
    }
    .filter(TaskSpec::is_well_formed)
}

/// The five fixed paraphrases of `instr`.
///
/// Slots are the leading verb, the first and second object nouns, and the
/// preposition "on". Each variant picks a synonym index per slot (or keeps
/// the word) from a fixed schedule, so the output is a pure function of the
/// input.
pub fn paraphrases(instr: &str) -> [String; NUM_PARAPHRASES] {
    // (verb, first noun, second noun, "on")
    const SCHEDULE: [[Option<usize>; 4]; NUM_PARAPHRASES] = [
        [Some(0), None, None, None],
        [Some(1), None, None, None],
        [None, Some(0), None, None],
        [Some(0), Some(1), Some(0), None],
        [Some(1), Some(0), Some(1), Some(0)],
    ];
    let words: Vec<&str> = instr.split_whitespace().collect();
    let nouns: Vec<usize> = words
        .iter()
        .enumerate()
        .filter(|(_, w)| type_by_name(w).is_some())
        .map(|(i, _)| i)
        .collect();
    SCHEDULE.map(|choice| {
        let mut out: Vec<&str> = words.clone();
        let mut sub = |pos: Option<usize>, pick: Option<usize>| {
            if let (Some(pos), Some(pick)) = (pos, pick) {
                if let Some(s) = synonyms(words[pos]) {
                    out[pos] = s[pick];
                }
            }
        };
        sub((!words.is_empty()).then_some(0), choice[0]);
        sub(nouns.first().copied(), choice[1]);
        sub(nouns.get(1).copied(), choice[2]);
        sub(words.iter().position(|&w| w == "on"), choice[3]);
        out.join(" ")
    })
}

/// Uniform draw among the canonical string and its five paraphrases.
pub fn paraphrase(instr: &str, rng: &mut SeedRng) -> String {
    let k = rng.below(NUM_PARAPHRASES + 1);
    if k == 0 {
        instr.to_string()
    } else {
        paraphrases(instr)[k - 1].clone()
    }
}

/// Static description used for caption pretraining, e.g.
/// "a scene with a pan at the back left and a pepper on the pan and a knife
/// at the front right and a knife next to the pot".
///
/// Every object gets its quadrant unless it sits on a container; every
/// on, next to and in front of relation between a non-container and a
/// container is named.
pub fn caption(state: &SimState) -> String {
    let objects = &state.scene.objects;
    let mut parts = Vec::new();
    for o in objects {
        let name = object_name(o.type_id);
        let base = objects
            .iter()
            .find(|c| c.is_container && !o.is_container && c.pos == o.pos);
        if let Some(c) = base {
            parts.push(format!("a {name} on the {}", object_name(c.type_id)));
            continue;
        }
        let fb = if (o.pos.y as usize) < GRID_H / 2 { "back" } else { "front" };
        let lr = if (o.pos.x as usize) < GRID_W / 2 { "left" } else { "right" };
        parts.push(format!("a {name} at the {fb} {lr}"));
    }
    for o in objects.iter().filter(|o| !o.is_container) {
        for c in objects.iter().filter(|c| c.is_container) {
            for relation in Relation::ALL {
                if relation_holds(o.pos, c.pos, relation) {
                    parts.push(format!(
                        "a {} {} the {}",
                        object_name(o.type_id),
                        relation.phrase(),
                        object_name(c.type_id)
                    ));
                }
            }
        }
    }
    format!("a scene with {}", parts.join(" and "))
}
