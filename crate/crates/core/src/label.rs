use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Binary class label. `Infected` is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    #[serde(alias = "noninfected")]
    NotInfected,
    Infected,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::NotInfected, ClassLabel::Infected];

    /// Canonical folder name.
    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::NotInfected => "notinfected",
            ClassLabel::Infected => "infected",
        }
    }

    /// Maps a class folder name to a label, accepting the `noninfected` spelling.
    pub fn from_folder_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "infected" => Some(ClassLabel::Infected),
            "notinfected" | "noninfected" => Some(ClassLabel::NotInfected),
            _ => None,
        }
    }

    /// Logit column index: `[notinfected, infected]`.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::NotInfected => 0,
            ClassLabel::Infected => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(ClassLabel::NotInfected),
            1 => Some(ClassLabel::Infected),
            _ => None,
        }
    }

    pub fn is_positive(self) -> bool {
        self == ClassLabel::Infected
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClassLabel::from_folder_name(s).ok_or_else(|| format!("unknown class label `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}
