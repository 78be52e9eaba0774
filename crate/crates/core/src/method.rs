use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Which dissimilarity produced a value. Values from different methods live
/// on different scales and must not be compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMethod {
    Euclidean,
    Pearson,
    Tangent,
    /// Monge-Ampere solve followed by quadrature.
    #[serde(rename = "wasserstein-pde", alias = "wasserstein")]
    Wasserstein,
    /// Exact discrete transport LP.
    KantorovichLp,
}

impl DistanceMethod {
    pub const ALL: [DistanceMethod; 5] = [
        DistanceMethod::Euclidean,
        DistanceMethod::Pearson,
        DistanceMethod::Tangent,
        DistanceMethod::Wasserstein,
        DistanceMethod::KantorovichLp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceMethod::Euclidean => "euclidean",
            DistanceMethod::Pearson => "pearson",
            DistanceMethod::Tangent => "tangent",
            DistanceMethod::Wasserstein => "wasserstein-pde",
            DistanceMethod::KantorovichLp => "kantorovich-lp",
        }
    }
}

impl fmt::Display for DistanceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DistanceMethod::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .or_else(|| s.eq_ignore_ascii_case("wasserstein").then_some(DistanceMethod::Wasserstein))
            .ok_or_else(|| Error::invalid(format!("unknown distance method {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in DistanceMethod::ALL {
            assert_eq!(m.name().parse::<DistanceMethod>().unwrap(), m);
        }
        assert_eq!("wasserstein".parse::<DistanceMethod>().unwrap(), DistanceMethod::Wasserstein);
        assert!("nope".parse::<DistanceMethod>().is_err());
    }
}
