//! Label types shared by every stage of the pipeline, plus small
//! fixed-size maps keyed by them.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the three prepared polarization states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StateLabel {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "+")]
    Plus,
}

impl StateLabel {
    pub const ALL: [StateLabel; 3] = [StateLabel::Zero, StateLabel::One, StateLabel::Plus];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn basis(self) -> Basis {
        match self {
            StateLabel::Zero | StateLabel::One => Basis::Z,
            StateLabel::Plus => Basis::X,
        }
    }

    /// Nominal angle on the S1-S3 great circle for a flawless source.
    pub fn ideal_theta_deg(self) -> f64 {
        match self {
            StateLabel::Zero => 0.0,
            StateLabel::One => 180.0,
            StateLabel::Plus => 90.0,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            StateLabel::Zero => "0",
            StateLabel::One => "1",
            StateLabel::Plus => "+",
        }
    }
}

impl fmt::Display for StateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for StateLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "0" | "zero" => Ok(StateLabel::Zero),
            "1" | "one" => Ok(StateLabel::One),
            "+" | "plus" => Ok(StateLabel::Plus),
            other => Err(format!(
                "unknown state label {other:?} (expected 0, 1 or +)"
            )),
        }
    }
}

/// Signal (higher) or decoy (lower) mean photon number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Signal,
    Decoy,
}

impl Intensity {
    pub const ALL: [Intensity; 2] = [Intensity::Signal, Intensity::Decoy];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Intensity::Signal => "signal",
            Intensity::Decoy => "decoy",
        }
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Intensity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "signal" | "mu0" => Ok(Intensity::Signal),
            "decoy" | "mu1" => Ok(Intensity::Decoy),
            other => Err(format!(
                "unknown intensity label {other:?} (expected signal or decoy)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::Z, Basis::X];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::Z => "Z",
            Basis::X => "X",
        })
    }
}

impl FromStr for Basis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "Z" | "z" => Ok(Basis::Z),
            "X" | "x" => Ok(Basis::X),
            other => Err(format!("unknown basis {other:?} (expected Z or X)")),
        }
    }
}

/// Bob's four threshold detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Detector {
    Z0,
    Z1,
    XPlus,
    XMinus,
}

impl Detector {
    pub const ALL: [Detector; 4] = [
        Detector::Z0,
        Detector::Z1,
        Detector::XPlus,
        Detector::XMinus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Detector {
        Detector::ALL[i]
    }

    pub fn basis(self) -> Basis {
        match self {
            Detector::Z0 | Detector::Z1 => Basis::Z,
            Detector::XPlus | Detector::XMinus => Basis::X,
        }
    }

    /// Unit Bloch vector of the state this detector projects onto.
    pub fn bloch_axis(self) -> [f64; 3] {
        match self {
            Detector::Z0 => [0.0, 0.0, 1.0],
            Detector::Z1 => [0.0, 0.0, -1.0],
            Detector::XPlus => [1.0, 0.0, 0.0],
            Detector::XMinus => [-1.0, 0.0, 0.0],
        }
    }
}

/// A value for each of the three prepared states.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerState<T> {
    pub zero: T,
    pub one: T,
    pub plus: T,
}

impl<T> PerState<T> {
    pub fn new(zero: T, one: T, plus: T) -> Self {
        PerState { zero, one, plus }
    }

    pub fn from_fn(mut f: impl FnMut(StateLabel) -> T) -> Self {
        PerState {
            zero: f(StateLabel::Zero),
            one: f(StateLabel::One),
            plus: f(StateLabel::Plus),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (StateLabel, &T)> {
        StateLabel::ALL.into_iter().map(move |s| (s, &self[s]))
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerState<U> {
        PerState::from_fn(|s| f(&self[s]))
    }
}

impl<T> Index<StateLabel> for PerState<T> {
    type Output = T;

    fn index(&self, s: StateLabel) -> &T {
        match s {
            StateLabel::Zero => &self.zero,
            StateLabel::One => &self.one,
            StateLabel::Plus => &self.plus,
        }
    }
}

impl<T> IndexMut<StateLabel> for PerState<T> {
    fn index_mut(&mut self, s: StateLabel) -> &mut T {
        match s {
            StateLabel::Zero => &mut self.zero,
            StateLabel::One => &mut self.one,
            StateLabel::Plus => &mut self.plus,
        }
    }
}

/// A value for each intensity setting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerIntensity<T> {
    pub signal: T,
    pub decoy: T,
}

impl<T> PerIntensity<T> {
    pub fn new(signal: T, decoy: T) -> Self {
        PerIntensity { signal, decoy }
    }

    pub fn from_fn(mut f: impl FnMut(Intensity) -> T) -> Self {
        PerIntensity {
            signal: f(Intensity::Signal),
            decoy: f(Intensity::Decoy),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Intensity, &T)> {
        Intensity::ALL.into_iter().map(move |a| (a, &self[a]))
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerIntensity<U> {
        PerIntensity::from_fn(|a| f(&self[a]))
    }
}

impl<T> Index<Intensity> for PerIntensity<T> {
    type Output = T;

    fn index(&self, a: Intensity) -> &T {
        match a {
            Intensity::Signal => &self.signal,
            Intensity::Decoy => &self.decoy,
        }
    }
}

impl<T> IndexMut<Intensity> for PerIntensity<T> {
    fn index_mut(&mut self, a: Intensity) -> &mut T {
        match a {
            Intensity::Signal => &mut self.signal,
            Intensity::Decoy => &mut self.decoy,
        }
    }
}
