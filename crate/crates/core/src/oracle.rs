//! The Oracle: parses predicate questions against a fixed grammar and
//! answers them truthfully from the full world state.
//!
//! Grammar: `sentence ::= color object "is" attribute` with six colors, three
//! object words and an attribute that is either a compass direction or a door
//! state. A question earns one of four answer codes; the code and the reward
//! schedule depend on the oracle mode.

use crate::grid::{Color, Heading, ObjectKind, WorldState};
use rand::Rng;

pub const SOS: u16 = 0;
pub const EOS: u16 = 1;
pub const VOCAB_SIZE: usize = 18;

/// Token strings in id order. Ids are stable across pretraining, training
/// and checkpoints.
pub const WORDS: [&str; VOCAB_SIZE] = [
    "<sos>", "<eos>", "red", "green", "blue", "purple", "yellow", "grey", "door", "goal", "wall",
    "is", "north", "south", "east", "west", "open", "closed",
];

pub fn word(id: u16) -> Option<&'static str> {
    WORDS.get(id as usize).copied()
}

pub fn word_id(word: &str) -> Option<u16> {
    WORDS.iter().position(|w| *w == word).map(|i| i as u16)
}

/// Space-joined surface form of a token sequence (markers excluded by the
/// caller), as used in transcripts.
pub fn sentence(tokens: &[u16]) -> String {
    tokens
        .iter()
        .filter_map(|&t| word(t))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectWord {
    Door,
    Goal,
    Wall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attribute {
    Direction(Heading),
    State(DoorWord),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DoorWord {
    Open,
    Closed,
}

/// A well-posed question; only constructible through [`parse`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Predicate {
    pub color: Color,
    pub object: ObjectWord,
    pub attribute: Attribute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    True,
    False,
    Undefined,
    SyntaxError,
}

impl Verdict {
    /// Two-bit answer vector handed to the agent.
    pub fn eta(self) -> [u8; 2] {
        match self {
            Verdict::True => [1, 1],
            Verdict::False => [0, 0],
            Verdict::Undefined => [0, 1],
            Verdict::SyntaxError => [1, 0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Verdict::True => "True",
            Verdict::False => "False",
            Verdict::Undefined => "Undefined",
            Verdict::SyntaxError => "SyntaxError",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleMode {
    /// True/False pay 0.2, Undefined 0, syntax errors -0.2.
    Train,
    /// Only syntax errors are penalised (-0.2); everything else pays 0.
    Test,
    /// Like Test, but parsed questions get a uniformly random True/False
    /// answer. The syntax penalty stays truthful.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnswerCode {
    pub verdict: Verdict,
    pub eta: [u8; 2],
    pub r_q: f32,
}

struct Parser<'a> {
    tokens: &'a [u16],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn next(&mut self) -> Option<u16> {
        let t = self.tokens.get(self.pos).copied();
        self.pos += 1;
        t
    }

    fn color(&mut self) -> Option<Color> {
        match self.next()? {
            2 => Some(Color::Red),
            3 => Some(Color::Green),
            4 => Some(Color::Blue),
            5 => Some(Color::Purple),
            6 => Some(Color::Yellow),
            7 => Some(Color::Grey),
            _ => None,
        }
    }

    fn object(&mut self) -> Option<ObjectWord> {
        match self.next()? {
            8 => Some(ObjectWord::Door),
            9 => Some(ObjectWord::Goal),
            10 => Some(ObjectWord::Wall),
            _ => None,
        }
    }

    fn is_word(&mut self) -> Option<()> {
        (self.next()? == 11).then_some(())
    }

    fn attribute(&mut self) -> Option<Attribute> {
        match self.next()? {
            12 => Some(Attribute::Direction(Heading::North)),
            13 => Some(Attribute::Direction(Heading::South)),
            14 => Some(Attribute::Direction(Heading::East)),
            15 => Some(Attribute::Direction(Heading::West)),
            16 => Some(Attribute::State(DoorWord::Open)),
            17 => Some(Attribute::State(DoorWord::Closed)),
            _ => None,
        }
    }

    fn at_end(&self) -> bool {
        self.pos == self.tokens.len()
    }
}

/// Parses a marker-free token sequence. `None` is the SyntaxError verdict,
/// not a failure.
pub fn parse(tokens: &[u16]) -> Option<Predicate> {
    let mut p = Parser { tokens, pos: 0 };
    let color = p.color()?;
    let object = p.object()?;
    p.is_word()?;
    let attribute = p.attribute()?;
    p.at_end().then_some(Predicate { color, object, attribute })
}

/// Truth value of a well-posed predicate against the full state. The
/// predicate must identify exactly one object; direction is judged by strict
/// displacement along the named compass axis from the agent's cell, and
/// open/closed only applies to doors.
pub fn evaluate(p: &Predicate, state: &WorldState) -> Verdict {
    let matches = matching_cells(p, state, 2);
    if matches.len() != 1 {
        return Verdict::Undefined;
    }
    let (r, c) = matches[0];
    match p.attribute {
        Attribute::State(word) => {
            if p.object != ObjectWord::Door {
                return Verdict::Undefined;
            }
            let open = state.cell(r, c).state == crate::grid::ObjectState::Open;
            let asked_open = word == DoorWord::Open;
            if open == asked_open {
                Verdict::True
            } else {
                Verdict::False
            }
        }
        Attribute::Direction(dir) => {
            let holds = match dir {
                Heading::North => r < state.agent_row,
                Heading::South => r > state.agent_row,
                Heading::East => c > state.agent_col,
                Heading::West => c < state.agent_col,
            };
            if holds {
                Verdict::True
            } else {
                Verdict::False
            }
        }
    }
}

/// Cells whose (kind, color) match the predicate, stopping once `limit`
/// matches are found (uniqueness only needs to distinguish 0, 1, many).
/// Doors and the goal come from the registries built at generation; walls
/// fall back to a bounded scan.
fn matching_cells(p: &Predicate, state: &WorldState, limit: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    match p.object {
        ObjectWord::Door => {
            for &(r, c) in &state.doors {
                if state.cell(r, c).color == Some(p.color) {
                    out.push((r, c));
                    if out.len() >= limit {
                        break;
                    }
                }
            }
        }
        ObjectWord::Goal => {
            let (r, c) = state.goal;
            if state.cell(r, c).color == Some(p.color) {
                out.push((r, c));
            }
        }
        ObjectWord::Wall => {
            'scan: for r in 0..state.height {
                for c in 0..state.width {
                    let cell = state.cell(r, c);
                    if cell.kind == ObjectKind::Wall && cell.color == Some(p.color) {
                        out.push((r, c));
                        if out.len() >= limit {
                            break 'scan;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Full oracle round: parse, evaluate, encode, reward.
pub fn answer<R: Rng>(
    tokens: &[u16],
    state: &WorldState,
    mode: OracleMode,
    rng: &mut R,
) -> AnswerCode {
    let Some(pred) = parse(tokens) else {
        return AnswerCode { verdict: Verdict::SyntaxError, eta: Verdict::SyntaxError.eta(), r_q: -0.2 };
    };
    let truthful = evaluate(&pred, state);
    let (verdict, r_q) = match mode {
        OracleMode::Train => {
            let r = match truthful {
                Verdict::True | Verdict::False => 0.2,
                _ => 0.0,
            };
            (truthful, r)
        }
        OracleMode::Test => (truthful, 0.0),
        OracleMode::Random => {
            let v = if rng.random_range(0..2) == 0 { Verdict::True } else { Verdict::False };
            (v, 0.0)
        }
    };
    AnswerCode { verdict, eta: verdict.eta(), r_q }
}

/// Every sentence of the grammar, each wrapped in `<sos>`/`<eos>`. This is
/// the pretraining corpus for the question policy.
pub fn enumerate_grammar() -> Vec<Vec<u16>> {
    let colors = 2u16..=7;
    let objects = 8u16..=10;
    let attributes = 12u16..=17;
    let mut out = Vec::new();
    for c in colors {
        for o in objects.clone() {
            for a in attributes.clone() {
                out.push(vec![SOS, c, o, 11, a, EOS]);
            }
        }
    }
    out
}
