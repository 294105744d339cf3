//! Per-layer `(rank, bits)` assignments.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank and base bit-width of one layer; `q = None` runs the factors in f64.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSetting {
    pub k: usize,
    pub q: Option<u8>,
}

impl LayerSetting {
    pub fn new(k: usize, q: u8) -> Self {
        LayerSetting { k, q: Some(q) }
    }

    pub fn float(k: usize) -> Self {
        LayerSetting { k, q: None }
    }

    /// Bits as an ordinal where float ranks above every finite width.
    pub fn q_rank(&self) -> u16 {
        self.q.map_or(u16::MAX, u16::from)
    }

    /// Componentwise `≤` on `(k, q)`.
    pub fn le(&self, other: &LayerSetting) -> bool {
        self.k <= other.k && self.q_rank() <= other.q_rank()
    }
}

impl fmt::Display for LayerSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.q {
            Some(q) => write!(f, "k{}q{}", self.k, q),
            None => write!(f, "k{}fp", self.k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Profile {
    pub id: String,
    pub layers: Vec<LayerSetting>,
}

impl Profile {
    /// Profile whose id is the canonical encoding of its settings.
    pub fn new(layers: Vec<LayerSetting>) -> Self {
        Profile { id: Self::canonical_id(&layers), layers }
    }

    pub fn named(id: impl Into<String>, layers: Vec<LayerSetting>) -> Self {
        Profile { id: id.into(), layers }
    }

    /// `k8q6-k16q8-k2fp`.
    pub fn canonical_id(layers: &[LayerSetting]) -> String {
        layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-")
    }

    /// Inverse of [`Profile::canonical_id`].
    pub fn parse_id(id: &str) -> Result<Vec<LayerSetting>> {
        id.split('-')
            .map(|part| {
                let bad = || Error::Format(format!("malformed profile id segment {part:?}"));
                let rest = part.strip_prefix('k').ok_or_else(bad)?;
                if let Some(k) = rest.strip_suffix("fp") {
                    return Ok(LayerSetting::float(k.parse().map_err(|_| bad())?));
                }
                let (k, q) = rest.split_once('q').ok_or_else(bad)?;
                Ok(LayerSetting::new(k.parse().map_err(|_| bad())?, q.parse().map_err(|_| bad())?))
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Every layer's `(k, q)` is `≤` the other profile's.
    pub fn le(&self, other: &Profile) -> bool {
        self.layers.len() == other.layers.len() && self.layers.iter().zip(&other.layers).all(|(a, b)| a.le(b))
    }

    /// Componentwise partial order.
    pub fn partial_cmp_componentwise(&self, other: &Profile) -> Option<Ordering> {
        match (self.le(other), other.le(self)) {
            (true, true) => Some(Ordering::Equal),
            (true, false) => Some(Ordering::Less),
            (false, true) => Some(Ordering::Greater),
            (false, false) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_round_trip() {
        let p = Profile::new(vec![LayerSetting::new(8, 6), LayerSetting::float(2)]);
        assert_eq!(p.id, "k8q6-k2fp");
        assert_eq!(Profile::parse_id(&p.id).unwrap(), p.layers);
        assert!(Profile::parse_id("x3").is_err());
    }

    #[test]
    fn float_dominates_bits() {
        assert!(LayerSetting::new(4, 8).le(&LayerSetting::float(4)));
        assert!(!LayerSetting::float(4).le(&LayerSetting::new(4, 8)));
        let a = Profile::new(vec![LayerSetting::new(2, 4), LayerSetting::new(3, 8)]);
        let b = Profile::new(vec![LayerSetting::new(3, 4), LayerSetting::new(2, 8)]);
        assert_eq!(a.partial_cmp_componentwise(&b), None);
    }
}
