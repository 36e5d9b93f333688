//! Dichotomies, traits and four-letter personality codes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the four opposing axes. Declaration order is the order letters
/// appear in a personality code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dichotomy {
    EI,
    SN,
    TF,
    JP,
}

impl Dichotomy {
    pub const ALL: [Dichotomy; 4] = [Dichotomy::EI, Dichotomy::SN, Dichotomy::TF, Dichotomy::JP];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn first(self) -> Trait {
        match self {
            Dichotomy::EI => Trait::E,
            Dichotomy::SN => Trait::S,
            Dichotomy::TF => Trait::T,
            Dichotomy::JP => Trait::J,
        }
    }

    pub fn second(self) -> Trait {
        match self {
            Dichotomy::EI => Trait::I,
            Dichotomy::SN => Trait::N,
            Dichotomy::TF => Trait::F,
            Dichotomy::JP => Trait::P,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dichotomy::EI => "EI",
            Dichotomy::SN => "SN",
            Dichotomy::TF => "TF",
            Dichotomy::JP => "JP",
        }
    }
}

impl fmt::Display for Dichotomy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Trait {
    E,
    I,
    S,
    N,
    T,
    F,
    J,
    P,
}

impl Trait {
    /// All eight traits, grouped by dichotomy with the first pole leading.
    pub const ALL: [Trait; 8] = [
        Trait::E,
        Trait::I,
        Trait::S,
        Trait::N,
        Trait::T,
        Trait::F,
        Trait::J,
        Trait::P,
    ];

    pub fn dichotomy(self) -> Dichotomy {
        match self {
            Trait::E | Trait::I => Dichotomy::EI,
            Trait::S | Trait::N => Dichotomy::SN,
            Trait::T | Trait::F => Dichotomy::TF,
            Trait::J | Trait::P => Dichotomy::JP,
        }
    }

    /// True for E, S, T and J.
    pub fn is_first(self) -> bool {
        self.dichotomy().first() == self
    }

    pub fn opposite(self) -> Trait {
        let d = self.dichotomy();
        if self.is_first() {
            d.second()
        } else {
            d.first()
        }
    }

    /// +1 for the first pole of its dichotomy, -1 for the second.
    pub fn sign(self) -> i32 {
        if self.is_first() {
            1
        } else {
            -1
        }
    }

    pub fn letter(self) -> char {
        match self {
            Trait::E => 'E',
            Trait::I => 'I',
            Trait::S => 'S',
            Trait::N => 'N',
            Trait::T => 'T',
            Trait::F => 'F',
            Trait::J => 'J',
            Trait::P => 'P',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Trait::E => "Extraversion",
            Trait::I => "Introversion",
            Trait::S => "Sensing",
            Trait::N => "Intuition",
            Trait::T => "Thinking",
            Trait::F => "Feeling",
            Trait::J => "Judging",
            Trait::P => "Perceiving",
        }
    }

    pub fn from_letter(c: char) -> Option<Trait> {
        Trait::ALL.into_iter().find(|t| t.letter() == c.to_ascii_uppercase())
    }
}

impl fmt::Display for Trait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Trait {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                Trait::from_letter(c).ok_or_else(|| Error::Invalid(format!("unknown trait {s:?}")))
            }
            _ => Err(Error::Invalid(format!("unknown trait {s:?}"))),
        }
    }
}

/// A four-letter code, one trait per dichotomy in E/I, S/N, T/F, J/P order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Personality([Trait; 4]);

impl Personality {
    pub fn new(traits: [Trait; 4]) -> Result<Self> {
        for (pos, (t, d)) in traits.iter().zip(Dichotomy::ALL).enumerate() {
            if t.dichotomy() != d {
                return Err(Error::Invalid(format!(
                    "position {}: trait {t} does not belong to {d}",
                    pos + 1
                )));
            }
        }
        Ok(Personality(traits))
    }

    pub fn traits(&self) -> [Trait; 4] {
        self.0
    }

    pub fn trait_for(&self, d: Dichotomy) -> Trait {
        self.0[d.index()]
    }

    /// All sixteen codes in alphabetical order.
    pub fn all() -> Vec<Personality> {
        let mut all: Vec<Personality> = (0..16u8)
            .map(|bits| {
                let pick = |d: Dichotomy| {
                    if bits >> (3 - d.index()) & 1 == 0 {
                        d.first()
                    } else {
                        d.second()
                    }
                };
                Personality(Dichotomy::ALL.map(pick))
            })
            .collect();
        all.sort_by_key(|p| p.to_string());
        all
    }
}

impl fmt::Display for Personality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in self.0 {
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for Personality {
    type Err = Error;

    fn from_str(code: &str) -> Result<Self> {
        personality_traits(code).map(Personality)
    }
}

/// Splits a personality code into its four traits. Lowercase input is
/// accepted.
pub fn personality_traits(code: &str) -> Result<[Trait; 4]> {
    let upper: Vec<char> = code.chars().map(|c| c.to_ascii_uppercase()).collect();
    if upper.len() != 4 {
        return Err(Error::Invalid(format!(
            "personality code {code:?} must have 4 letters, found {}",
            upper.len()
        )));
    }
    let mut out = [Trait::E; 4];
    for (pos, (&c, d)) in upper.iter().zip(Dichotomy::ALL).enumerate() {
        out[pos] = Trait::from_letter(c)
            .filter(|t| t.dichotomy() == d)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "position {}: {c:?} is not one of {}/{}",
                    pos + 1,
                    d.first(),
                    d.second()
                ))
            })?;
    }
    Ok(out)
}
