//! Templated instruction grammar, word-level tokenizer and evaluation splits.
//!
//! The grammar lives in `data/grammar.txt`; each line is
//! `task_type | seen/unseen | template`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};

pub const MAX_TOKENS: usize = 12;
pub const MAX_VOCAB: usize = 64;
pub const PAD: u16 = 0;
pub const UNK: u16 = 1;
pub const TEMPLATES_PER_TASK: usize = 16;

const BUILTIN_GRAMMAR: &str = include_str!("../data/grammar.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskType {
    CornerFold,
    TriangleFold,
    HalfFold,
}

impl TaskType {
    pub const ALL: [TaskType; 3] = [TaskType::CornerFold, TaskType::TriangleFold, TaskType::HalfFold];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("invalid task type code {code}")))
    }

    /// Short name used in the grammar file, reports and the CLI.
    pub fn name(self) -> &'static str {
        match self {
            TaskType::CornerFold => "corner",
            TaskType::TriangleFold => "triangle",
            TaskType::HalfFold => "half",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn directions(self) -> [Direction; 4] {
        use Direction::*;
        match self {
            TaskType::CornerFold | TaskType::TriangleFold => [BottomLeft, BottomRight, TopLeft, TopRight],
            TaskType::HalfFold => [LeftOverRight, RightOverLeft, TopOverBottom, BottomOverTop],
        }
    }

    /// The direction never shown during training (the unseen task).
    pub fn held_out_direction(self) -> Direction {
        match self {
            TaskType::CornerFold => Direction::BottomRight,
            TaskType::TriangleFold => Direction::TopLeft,
            TaskType::HalfFold => Direction::RightOverLeft,
        }
    }

    pub fn training_directions(self) -> Vec<Direction> {
        let held = self.held_out_direction();
        self.directions().into_iter().filter(|&d| d != held).collect()
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    BottomLeft,
    BottomRight,
    TopLeft,
    TopRight,
    LeftOverRight,
    RightOverLeft,
    TopOverBottom,
    BottomOverTop,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::BottomLeft,
        Direction::BottomRight,
        Direction::TopLeft,
        Direction::TopRight,
        Direction::LeftOverRight,
        Direction::RightOverLeft,
        Direction::TopOverBottom,
        Direction::BottomOverTop,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("invalid direction code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::BottomLeft => "bottom_left",
            Direction::BottomRight => "bottom_right",
            Direction::TopLeft => "top_left",
            Direction::TopRight => "top_right",
            Direction::LeftOverRight => "left_over_right",
            Direction::RightOverLeft => "right_over_left",
            Direction::TopOverBottom => "top_over_bottom",
            Direction::BottomOverTop => "bottom_over_top",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == name)
    }

    fn is_corner(self) -> bool {
        (self as u8) < 4
    }

    /// `(from, to)` side words of a half fold.
    fn sides(self) -> (&'static str, &'static str) {
        match self {
            Direction::LeftOverRight => ("left", "right"),
            Direction::RightOverLeft => ("right", "left"),
            Direction::TopOverBottom => ("top", "bottom"),
            Direction::BottomOverTop => ("bottom", "top"),
            _ => ("", ""),
        }
    }

    fn corner_words(self) -> &'static str {
        match self {
            Direction::BottomLeft => "bottom left",
            Direction::BottomRight => "bottom right",
            Direction::TopLeft => "top left",
            Direction::TopRight => "top right",
            _ => "",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskSpec {
    task_type: TaskType,
    direction: Direction,
}

impl TaskSpec {
    pub fn new(task_type: TaskType, direction: Direction) -> Result<Self> {
        let corner_task = task_type != TaskType::HalfFold;
        if corner_task != direction.is_corner() {
            return Err(contract(format!("direction {} does not apply to {task_type} folding", direction.name())));
        }
        Ok(Self { task_type, direction })
    }

    pub fn task_type(&self) -> TaskType {
        self.task_type
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn is_held_out(&self) -> bool {
        self.direction == self.task_type.held_out_direction()
    }

    /// Every (task type, training direction) pair.
    pub fn training_tasks() -> Vec<TaskSpec> {
        TaskType::ALL
            .into_iter()
            .flat_map(|t| t.training_directions().into_iter().map(move |d| TaskSpec { task_type: t, direction: d }))
            .collect()
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.task_type.name(), self.direction.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    SeenInstr,
    UnseenInstr,
    UnseenTask,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::SeenInstr, Split::UnseenInstr, Split::UnseenTask];

    pub fn name(self) -> &'static str {
        match self {
            Split::SeenInstr => "seen_instruction",
            Split::UnseenInstr => "unseen_instruction",
            Split::UnseenTask => "unseen_task",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instruction {
    pub text: String,
    pub tokens: [u16; MAX_TOKENS],
    pub task: TaskSpec,
    pub template_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug)]
struct Template {
    seen: bool,
    text: String,
}

/// Parsed grammar: sixteen templates per task type, in file order.
#[derive(Clone, Debug)]
pub struct Grammar {
    templates: HashMap<TaskType, Vec<Template>>,
}

impl Grammar {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_GRAMMAR).expect("bundled grammar is valid")
    }

    pub fn parse(src: &str) -> Result<Self> {
        let mut templates: HashMap<TaskType, Vec<Template>> = HashMap::new();
        for (lineno, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.splitn(3, '|').map(str::trim).collect();
            let bad = |what: &str| Error::Format(format!("grammar line {}: {what}", lineno + 1));
            if parts.len() != 3 {
                return Err(bad("expected `task | seen/unseen | template`"));
            }
            let task = TaskType::from_name(parts[0]).ok_or_else(|| bad("unknown task type"))?;
            let seen = match parts[1] {
                "seen" => true,
                "unseen" => false,
                _ => return Err(bad("second field must be seen or unseen")),
            };
            templates.entry(task).or_default().push(Template { seen, text: parts[2].to_string() });
        }
        for task in TaskType::ALL {
            let list = templates.get(&task).map(Vec::as_slice).unwrap_or(&[]);
            let seen = list.iter().filter(|t| t.seen).count();
            if list.len() != TEMPLATES_PER_TASK || seen != 12 {
                return Err(Error::Format(format!(
                    "{task} needs 16 templates (12 seen), found {} ({seen} seen)",
                    list.len()
                )));
            }
        }
        Ok(Self { templates })
    }

    pub fn is_seen_template(&self, task_type: TaskType, template_id: usize) -> bool {
        self.templates[&task_type].get(template_id).is_some_and(|t| t.seen)
    }

    pub fn generate_instruction(&self, task: TaskSpec, template_id: usize) -> Result<String> {
        let template = self.templates[&task.task_type]
            .get(template_id)
            .ok_or_else(|| contract(format!("template {template_id} does not exist for {}", task.task_type)))?;
        let (from, to) = task.direction.sides();
        Ok(template
            .text
            .replace("{dir}", task.direction.corner_words())
            .replace("{from}", from)
            .replace("{to}", to))
    }

    /// Every instantiated sentence, in (task, direction, template) order.
    pub fn all_sentences(&self) -> Vec<(TaskSpec, usize, String)> {
        let mut out = Vec::new();
        for task_type in TaskType::ALL {
            for direction in task_type.directions() {
                let task = TaskSpec { task_type, direction };
                for id in 0..TEMPLATES_PER_TASK {
                    out.push((task, id, self.generate_instruction(task, id).expect("valid id")));
                }
            }
        }
        out
    }
}

/// Word to id map built once from the full grammar. Ids 0 and 1 are PAD and
/// UNK; the remaining words are numbered in sorted order.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u16>,
}

impl Vocabulary {
    pub fn from_grammar(grammar: &Grammar) -> Result<Self> {
        let set: BTreeSet<String> = grammar
            .all_sentences()
            .iter()
            .flat_map(|(_, _, s)| s.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect();
        let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
        words.extend(set);
        if words.len() > MAX_VOCAB {
            return Err(Error::Format(format!("grammar needs {} vocabulary entries, limit is {MAX_VOCAB}", words.len())));
        }
        let ids = words.iter().enumerate().skip(2).map(|(i, w)| (w.clone(), i as u16)).collect();
        Ok(Self { words, ids })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u16 {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn tokenize(&self, text: &str) -> Result<[u16; MAX_TOKENS]> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().collect();
        if words.len() > MAX_TOKENS {
            return Err(contract(format!("instruction has {} words, at most {MAX_TOKENS} allowed", words.len())));
        }
        let mut out = [PAD; MAX_TOKENS];
        for (slot, w) in out.iter_mut().zip(&words) {
            *slot = self.id(w);
        }
        Ok(out)
    }

    /// Joins non-PAD tokens with single spaces.
    pub fn detokenize(&self, tokens: &[u16]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != PAD)
            .map(|&t| self.words.get(t as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Grammar plus its vocabulary.
#[derive(Clone, Debug)]
pub struct Language {
    pub grammar: Grammar,
    pub vocab: Vocabulary,
}

impl Language {
    pub fn builtin() -> Self {
        let grammar = Grammar::builtin();
        let vocab = Vocabulary::from_grammar(&grammar).expect("bundled grammar fits the vocabulary");
        Self { grammar, vocab }
    }

    pub fn instruction(&self, task: TaskSpec, template_id: usize) -> Result<Instruction> {
        let text = self.grammar.generate_instruction(task, template_id)?;
        let tokens = self.vocab.tokenize(&text)?;
        let split = if task.is_held_out() {
            Split::UnseenTask
        } else if self.grammar.is_seen_template(task.task_type, template_id) {
            Split::SeenInstr
        } else {
            Split::UnseenInstr
        };
        Ok(Instruction { text, tokens, task, template_id, split })
    }

    /// Partitions the grammar into the three evaluation splits. The seed only
    /// fixes the order inside each set.
    pub fn build_splits(&self, seed: u64) -> Splits {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sets = HashMap::new();
        for task_type in TaskType::ALL {
            let mut per: HashMap<Split, Vec<Instruction>> = Split::ALL.into_iter().map(|s| (s, Vec::new())).collect();
            for direction in task_type.directions() {
                let task = TaskSpec { task_type, direction };
                for id in 0..TEMPLATES_PER_TASK {
                    let ins = self.instruction(task, id).expect("grammar instantiates");
                    per.get_mut(&ins.split).expect("all splits present").push(ins);
                }
            }
            for split in Split::ALL {
                let mut list = per.remove(&split).expect("all splits present");
                list.shuffle(&mut rng);
                sets.insert((task_type, split), list);
            }
        }
        Splits { sets }
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    sets: HashMap<(TaskType, Split), Vec<Instruction>>,
}

impl Splits {
    pub fn get(&self, task_type: TaskType, split: Split) -> &[Instruction] {
        &self.sets[&(task_type, split)]
    }

    /// Seen-instruction sentences for one task, in split order.
    pub fn seen_for(&self, task: TaskSpec) -> Vec<&Instruction> {
        self.get(task.task_type, Split::SeenInstr).iter().filter(|i| i.task == task).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn first_corner_template() {
        let lang = Language::builtin();
        let task = TaskSpec::new(TaskType::CornerFold, Direction::BottomLeft).unwrap();
        assert_eq!(lang.grammar.generate_instruction(task, 0).unwrap(), "fold the bottom left corner to the center");
        assert!(lang.grammar.generate_instruction(task, 16).is_err());
    }

    #[test]
    fn every_sentence_is_distinct_and_short() {
        let lang = Language::builtin();
        let all = lang.grammar.all_sentences();
        assert_eq!(all.len(), 3 * 4 * 16);
        let unique: HashSet<_> = all.iter().map(|(_, _, s)| s.clone()).collect();
        assert_eq!(unique.len(), all.len());
        assert!(all.iter().all(|(_, _, s)| s.split_whitespace().count() <= MAX_TOKENS));
    }

    #[test]
    fn tokenize_edge_cases() {
        let lang = Language::builtin();
        assert_eq!(lang.vocab.tokenize("").unwrap(), [PAD; MAX_TOKENS]);
        let fold = lang.vocab.id("fold");
        let t = lang.vocab.tokenize("fold fold fold").unwrap();
        assert_eq!(&t[..3], &[fold; 3]);
        assert!(t[3..].iter().all(|&x| x == PAD));
        assert_eq!(lang.vocab.tokenize("fold xyzzy").unwrap()[1], UNK);
        assert!(lang.vocab.tokenize(&"fold ".repeat(13)).is_err());
    }

    #[test]
    fn grammar_round_trips_through_tokens() {
        let lang = Language::builtin();
        assert!(lang.vocab.len() <= MAX_VOCAB);
        for (_, _, s) in lang.grammar.all_sentences() {
            let t = lang.vocab.tokenize(&s).unwrap();
            assert_eq!(lang.vocab.detokenize(&t), s);
        }
    }

    #[test]
    fn direction_must_match_task() {
        assert!(TaskSpec::new(TaskType::HalfFold, Direction::TopLeft).is_err());
        assert!(TaskSpec::new(TaskType::CornerFold, Direction::LeftOverRight).is_err());
    }

    #[test]
    fn codes_round_trip() {
        for t in TaskType::ALL {
            assert_eq!(TaskType::from_code(t.code()).unwrap(), t);
        }
        for d in Direction::ALL {
            assert_eq!(Direction::from_code(d.code()).unwrap(), d);
            assert_eq!(Direction::from_name(d.name()), Some(d));
        }
        assert!(TaskType::from_code(3).is_err());
    }

    #[test]
    fn corner_split_counts() {
        let splits = Language::builtin().build_splits(0);
        assert_eq!(splits.get(TaskType::CornerFold, Split::SeenInstr).len(), 36);
        assert_eq!(splits.get(TaskType::CornerFold, Split::UnseenInstr).len(), 12);
        assert_eq!(splits.get(TaskType::CornerFold, Split::UnseenTask).len(), 16);
    }

    #[test]
    fn bottom_right_corner_is_an_unseen_task() {
        let splits = Language::builtin().build_splits(3);
        assert!(splits
            .get(TaskType::CornerFold, Split::UnseenTask)
            .iter()
            .any(|i| i.text == "fold the bottom right corner to the center"));
    }

    #[test]
    fn splits_partition_the_grammar() {
        let lang = Language::builtin();
        let splits = lang.build_splits(1);
        for task in TaskType::ALL {
            let mut seen = HashSet::new();
            for split in Split::ALL {
                for ins in splits.get(task, split) {
                    assert!(seen.insert(ins.text.clone()), "{} in two splits", ins.text);
                }
            }
            assert_eq!(seen.len(), 64);
        }
    }

    #[test]
    fn unseen_sentences_use_only_seen_words() {
        let lang = Language::builtin();
        let splits = lang.build_splits(0);
        let mut seen_words = HashSet::new();
        for task in TaskType::ALL {
            for ins in splits.get(task, Split::SeenInstr) {
                seen_words.extend(ins.text.split_whitespace().map(str::to_string));
            }
        }
        for task in TaskType::ALL {
            for split in [Split::UnseenInstr, Split::UnseenTask] {
                for ins in splits.get(task, split) {
                    assert!(!ins.tokens.contains(&UNK));
                    for w in ins.text.split_whitespace() {
                        assert!(seen_words.contains(w), "`{w}` only appears in unseen sentences");
                    }
                }
            }
        }
    }

    #[test]
    fn splits_are_deterministic() {
        let lang = Language::builtin();
        let a = lang.build_splits(9);
        let b = lang.build_splits(9);
        for task in TaskType::ALL {
            for split in Split::ALL {
                assert_eq!(a.get(task, split), b.get(task, split));
            }
        }
    }
}
