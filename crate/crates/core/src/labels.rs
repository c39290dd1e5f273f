use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_GRADES: usize = 3;

/// Tumor differentiation grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    GradeI,
    GradeII,
    GradeIII,
}

impl Grade {
    pub const ALL: [Grade; NUM_GRADES] = [Grade::GradeI, Grade::GradeII, Grade::GradeIII];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Grade> {
        Grade::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("grade index {i} out of range")))
    }

    /// Folder name used by structured dataset trees.
    pub fn dir_name(self) -> &'static str {
        match self {
            Grade::GradeI => "grade_i",
            Grade::GradeII => "grade_ii",
            Grade::GradeIII => "grade_iii",
        }
    }

    pub fn roman(self) -> &'static str {
        match self {
            Grade::GradeI => "I",
            Grade::GradeII => "II",
            Grade::GradeIII => "III",
        }
    }

    /// One-hot probability row.
    pub fn one_hot(self) -> [f32; NUM_GRADES] {
        let mut v = [0.0; NUM_GRADES];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grade {}", self.roman())
    }
}

impl FromStr for Grade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Grade> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        match norm.as_str() {
            "gradei" | "grade_i" | "i" | "1" | "g1" | "grade1" | "grade_1" => Ok(Grade::GradeI),
            "gradeii" | "grade_ii" | "ii" | "2" | "g2" | "grade2" | "grade_2" => Ok(Grade::GradeII),
            "gradeiii" | "grade_iii" | "iii" | "3" | "g3" | "grade3" | "grade_3" => {
                Ok(Grade::GradeIII)
            }
            _ => Err(Error::InvalidArgument(format!("unknown grade `{s}`"))),
        }
    }
}

/// Acquisition magnification level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Magnification {
    #[serde(rename = "4x")]
    X4,
    #[serde(rename = "10x")]
    X10,
    #[serde(rename = "20x")]
    X20,
    #[serde(rename = "40x")]
    X40,
}

impl Magnification {
    pub const ALL: [Magnification; 4] = [
        Magnification::X4,
        Magnification::X10,
        Magnification::X20,
        Magnification::X40,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Magnification::X4 => "4x",
            Magnification::X10 => "10x",
            Magnification::X20 => "20x",
            Magnification::X40 => "40x",
        }
    }

    pub fn power(self) -> u32 {
        match self {
            Magnification::X4 => 4,
            Magnification::X10 => 10,
            Magnification::X20 => 20,
            Magnification::X40 => 40,
        }
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Magnification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Magnification> {
        match s.trim().to_ascii_lowercase().as_str() {
            "4x" | "4" | "x4" => Ok(Magnification::X4),
            "10x" | "10" | "x10" => Ok(Magnification::X10),
            "20x" | "20" | "x20" => Ok(Magnification::X20),
            "40x" | "40" | "x40" => Ok(Magnification::X40),
            _ => Err(Error::InvalidArgument(format!(
                "unknown magnification `{s}`"
            ))),
        }
    }
}
