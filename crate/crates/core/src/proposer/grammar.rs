//! The skill grammar shared by the proposer, the augmenter and the policy vocabulary.
//!
//! ```text
//! move the gripper D [and D] [towards TARGET]
//! rotate the gripper R
//! close the gripper [to pick up TARGET]
//! open the gripper [to release TARGET]
//! move the gripper back to neutral
//! ```
//!
//! `D` is a translation direction, `R` a rotation word, `TARGET` any nonempty
//! run of words. Parsing is case-insensitive, tolerates repeated whitespace and
//! a trailing period.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::Forward,
        Direction::Backward,
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Direction::ALL.into_iter().find(|d| d.word() == w)
    }

    /// World axis (0 = x, 1 = y, 2 = z) and sign. +x forward, +y left, +z up.
    pub fn axis(self) -> (usize, f64) {
        match self {
            Direction::Forward => (0, 1.0),
            Direction::Backward => (0, -1.0),
            Direction::Left => (1, 1.0),
            Direction::Right => (1, -1.0),
            Direction::Up => (2, 1.0),
            Direction::Down => (2, -1.0),
        }
    }

    pub fn from_axis(axis: usize, positive: bool) -> Self {
        match (axis, positive) {
            (0, true) => Direction::Forward,
            (0, false) => Direction::Backward,
            (1, true) => Direction::Left,
            (1, false) => Direction::Right,
            (2, true) => Direction::Up,
            (2, false) => Direction::Down,
            _ => panic!("translation axis out of range: {axis}"),
        }
    }

    pub fn opposite(self) -> Self {
        let (a, s) = self.axis();
        Direction::from_axis(a, s < 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rotation {
    Left,
    Right,
    Up,
    Down,
    Clockwise,
    Counterclockwise,
}

impl Rotation {
    pub const ALL: [Rotation; 6] = [
        Rotation::Left,
        Rotation::Right,
        Rotation::Up,
        Rotation::Down,
        Rotation::Clockwise,
        Rotation::Counterclockwise,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Rotation::Left => "left",
            Rotation::Right => "right",
            Rotation::Up => "up",
            Rotation::Down => "down",
            Rotation::Clockwise => "clockwise",
            Rotation::Counterclockwise => "counterclockwise",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Rotation::ALL.into_iter().find(|r| r.word() == w)
    }

    /// Rotation channel (0 = yaw, 1 = pitch, 2 = roll) and sign.
    /// yaw+ is clockwise, pitch+ is up, roll+ is left.
    pub fn axis(self) -> (usize, f64) {
        match self {
            Rotation::Clockwise => (0, 1.0),
            Rotation::Counterclockwise => (0, -1.0),
            Rotation::Up => (1, 1.0),
            Rotation::Down => (1, -1.0),
            Rotation::Left => (2, 1.0),
            Rotation::Right => (2, -1.0),
        }
    }

    pub fn from_axis(axis: usize, positive: bool) -> Self {
        match (axis, positive) {
            (0, true) => Rotation::Clockwise,
            (0, false) => Rotation::Counterclockwise,
            (1, true) => Rotation::Up,
            (1, false) => Rotation::Down,
            (2, true) => Rotation::Left,
            (2, false) => Rotation::Right,
            _ => panic!("rotation axis out of range: {axis}"),
        }
    }

    pub fn opposite(self) -> Self {
        let (a, s) = self.axis();
        Rotation::from_axis(a, s < 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperAction {
    Close,
    Open,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SkillPrimitive {
    Move {
        dirs: Vec<Direction>,
        target: Option<String>,
    },
    Rotate(Rotation),
    Gripper {
        action: GripperAction,
        target: Option<String>,
    },
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse skill '{input}': {reason} at token {position} ('{token}')")]
pub struct ParseError {
    pub input: String,
    pub token: String,
    pub position: usize,
    pub reason: String,
}

impl SkillPrimitive {
    pub fn render(&self) -> String {
        match self {
            SkillPrimitive::Move { dirs, target } => {
                let mut s = String::from("move the gripper ");
                let words: Vec<&str> = dirs.iter().map(|d| d.word()).collect();
                s.push_str(&words.join(" and "));
                if let Some(t) = target {
                    s.push_str(" towards ");
                    s.push_str(t);
                }
                s
            }
            SkillPrimitive::Rotate(r) => format!("rotate the gripper {}", r.word()),
            SkillPrimitive::Gripper { action, target } => match (action, target) {
                (GripperAction::Close, None) => "close the gripper".into(),
                (GripperAction::Close, Some(t)) => format!("close the gripper to pick up {t}"),
                (GripperAction::Open, None) => "open the gripper".into(),
                (GripperAction::Open, Some(t)) => format!("open the gripper to release {t}"),
            },
            SkillPrimitive::Neutral => "move the gripper back to neutral".into(),
        }
    }

    pub fn is_neutral(&self) -> bool {
        matches!(self, SkillPrimitive::Neutral)
    }

    pub fn target(&self) -> Option<&str> {
        match self {
            SkillPrimitive::Move { target, .. } | SkillPrimitive::Gripper { target, .. } => {
                target.as_deref()
            }
            _ => None,
        }
    }
}

impl fmt::Display for SkillPrimitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

fn tokens(text: &str) -> Vec<String> {
    let lower = text.trim().to_lowercase();
    let trimmed = lower.trim_end_matches('.').trim_end();
    trimmed.split_whitespace().map(str::to_owned).collect()
}

struct Cursor<'a> {
    input: &'a str,
    toks: Vec<String>,
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, reason: &str) -> ParseError {
        ParseError {
            input: self.input.to_owned(),
            token: self.toks.get(self.pos).cloned().unwrap_or_else(|| "<end>".into()),
            position: self.pos,
            reason: reason.to_owned(),
        }
    }

    fn peek(&self) -> Option<&str> {
        self.toks.get(self.pos).map(String::as_str)
    }

    fn expect(&mut self, word: &str) -> Result<(), ParseError> {
        if self.peek() == Some(word) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{word}'")))
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn rest(&mut self) -> Result<String, ParseError> {
        if self.at_end() {
            return Err(self.err("expected a target object"));
        }
        let s = self.toks[self.pos..].join(" ");
        self.pos = self.toks.len();
        Ok(s)
    }

    fn end(&self) -> Result<(), ParseError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.err("unexpected trailing token"))
        }
    }
}

pub fn parse_skill(text: &str) -> Result<SkillPrimitive, ParseError> {
    let mut c = Cursor {
        input: text,
        toks: tokens(text),
        pos: 0,
    };
    match c.peek() {
        Some("move") => {
            c.pos += 1;
            c.expect("the")?;
            c.expect("gripper")?;
            if c.peek() == Some("back") {
                c.pos += 1;
                c.expect("to")?;
                c.expect("neutral")?;
                c.end()?;
                return Ok(SkillPrimitive::Neutral);
            }
            let mut dirs = Vec::new();
            let first = c
                .peek()
                .and_then(Direction::from_word)
                .ok_or_else(|| c.err("expected a direction"))?;
            dirs.push(first);
            c.pos += 1;
            if c.peek() == Some("and") {
                c.pos += 1;
                let second = c
                    .peek()
                    .and_then(Direction::from_word)
                    .ok_or_else(|| c.err("expected a second direction"))?;
                if second == first {
                    return Err(c.err("repeated direction"));
                }
                dirs.push(second);
                c.pos += 1;
            }
            let target = if c.peek() == Some("towards") {
                c.pos += 1;
                Some(c.rest()?)
            } else {
                c.end()?;
                None
            };
            Ok(SkillPrimitive::Move { dirs, target })
        }
        Some("rotate") => {
            c.pos += 1;
            c.expect("the")?;
            c.expect("gripper")?;
            let r = c
                .peek()
                .and_then(Rotation::from_word)
                .ok_or_else(|| c.err("expected a rotation direction"))?;
            c.pos += 1;
            c.end()?;
            Ok(SkillPrimitive::Rotate(r))
        }
        Some(w @ ("close" | "open")) => {
            let action = if w == "close" {
                GripperAction::Close
            } else {
                GripperAction::Open
            };
            c.pos += 1;
            c.expect("the")?;
            c.expect("gripper")?;
            if c.at_end() {
                return Ok(SkillPrimitive::Gripper {
                    action,
                    target: None,
                });
            }
            c.expect("to")?;
            match action {
                GripperAction::Close => {
                    c.expect("pick")?;
                    c.expect("up")?;
                }
                GripperAction::Open => c.expect("release")?,
            }
            let target = Some(c.rest()?);
            Ok(SkillPrimitive::Gripper { action, target })
        }
        _ => Err(c.err("expected 'move', 'rotate', 'close' or 'open'")),
    }
}

/// Canonical surface form of a grammar string.
pub fn canonical(text: &str) -> Result<String, ParseError> {
    parse_skill(text).map(|s| s.render())
}

/// Every grammar string over the given target set.
pub fn enumerate(targets: &[&str]) -> Vec<SkillPrimitive> {
    let mut opt_targets: Vec<Option<String>> = vec![None];
    opt_targets.extend(targets.iter().map(|t| Some(t.to_string())));
    let mut out = Vec::new();
    for &a in &Direction::ALL {
        let mut dir_sets = vec![vec![a]];
        for &b in &Direction::ALL {
            if b != a {
                dir_sets.push(vec![a, b]);
            }
        }
        for dirs in dir_sets {
            for t in &opt_targets {
                out.push(SkillPrimitive::Move {
                    dirs: dirs.clone(),
                    target: t.clone(),
                });
            }
        }
    }
    out.extend(Rotation::ALL.into_iter().map(SkillPrimitive::Rotate));
    for action in [GripperAction::Close, GripperAction::Open] {
        for t in &opt_targets {
            out.push(SkillPrimitive::Gripper {
                action,
                target: t.clone(),
            });
        }
    }
    out.push(SkillPrimitive::Neutral);
    out
}
