use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CitiError;

/// The seven linear projections of a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfnUp,
    FfnGate,
    FfnDown,
}

impl Slot {
    pub const ALL: [Slot; 7] = [
        Slot::AttnQ,
        Slot::AttnK,
        Slot::AttnV,
        Slot::AttnO,
        Slot::FfnUp,
        Slot::FfnGate,
        Slot::FfnDown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Slot::AttnQ => "attn_q",
            Slot::AttnK => "attn_k",
            Slot::AttnV => "attn_v",
            Slot::AttnO => "attn_o",
            Slot::FfnUp => "ffn_up",
            Slot::FfnGate => "ffn_gate",
            Slot::FfnDown => "ffn_down",
        }
    }
}

impl FromStr for Slot {
    type Err = CitiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Slot::ALL
            .into_iter()
            .find(|slot| slot.as_str() == s)
            .ok_or_else(|| CitiError::contract(format!("unknown slot {s}")))
    }
}

/// One linear component: a (layer, slot) pair. Ordering is lexicographic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ComponentId {
    pub layer: usize,
    pub slot: Slot,
}

impl ComponentId {
    pub fn new(layer: usize, slot: Slot) -> Self {
        Self { layer, slot }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}/{}", self.layer, self.slot.as_str())
    }
}

impl From<ComponentId> for String {
    fn from(id: ComponentId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for ComponentId {
    type Error = CitiError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for ComponentId {
    type Err = CitiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CitiError::contract(format!("malformed component id {s}"));
        let (layer, slot) = s.split_once('/').ok_or_else(bad)?;
        let layer = layer
            .strip_prefix("layer")
            .and_then(|l| l.parse().ok())
            .ok_or_else(bad)?;
        Ok(ComponentId::new(layer, slot.parse()?))
    }
}

/// Where a hidden state is read: the normalized input of a sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    AttnInput,
    FfnInput,
}

impl SiteKind {
    pub const ALL: [SiteKind; 2] = [SiteKind::AttnInput, SiteKind::FfnInput];

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::AttnInput => "attn_input",
            SiteKind::FfnInput => "ffn_input",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProbeSite {
    pub layer: usize,
    pub site: SiteKind,
}

impl ProbeSite {
    pub fn new(layer: usize, site: SiteKind) -> Self {
        Self { layer, site }
    }
}
