use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phenology::Stage;
use crate::raster::{BinaryMask, MASK_NODATA};

/// How land preparation, vegetative and reproductive masks are merged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationPolicy {
    All,
    Any,
    #[default]
    Majority,
}

impl CombinationPolicy {
    fn decide(self, yes: usize) -> bool {
        match self {
            CombinationPolicy::All => yes == 3,
            CombinationPolicy::Any => yes >= 1,
            CombinationPolicy::Majority => yes >= 2,
        }
    }
}

/// Merges the three area stages. The ripening mask, if present, is ignored.
///
/// Nodata never counts as a vote for paddy; a pixel nodata in all three stages stays nodata.
pub fn combine_stages(masks: &BTreeMap<Stage, BinaryMask>, policy: CombinationPolicy) -> Result<BinaryMask> {
    let mut stages = Vec::with_capacity(3);
    for s in Stage::AREA_STAGES {
        let m = masks
            .get(&s)
            .ok_or_else(|| Error::InvalidParameter(format!("no {s} mask to combine")))?;
        stages.push(m);
    }
    let grid = stages[0].grid.clone();
    for m in &stages[1..] {
        m.grid.ensure_aligned(&grid, "stage mask")?;
    }
    let values = (0..grid.len())
        .map(|p| {
            let votes = stages.iter().map(|m| m.values()[p]);
            if votes.clone().all(|v| v == MASK_NODATA) {
                return MASK_NODATA;
            }
            let yes = votes.filter(|v| *v == 1).count();
            policy.decide(yes) as u8
        })
        .collect();
    BinaryMask::new(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoGrid;

    fn masks(lp: u8, veg: u8, rep: u8, rip: u8) -> BTreeMap<Stage, BinaryMask> {
        let grid = GeoGrid::new(0.0, 0.0, 10.0, 1, 1, "x").unwrap();
        [
            (Stage::LandPreparation, lp),
            (Stage::Vegetative, veg),
            (Stage::Reproductive, rep),
            (Stage::Ripening, rip),
        ]
        .into_iter()
        .map(|(s, v)| (s, BinaryMask::new(grid.clone(), vec![v]).unwrap()))
        .collect()
    }

    const POLICIES: [CombinationPolicy; 3] = [
        CombinationPolicy::All,
        CombinationPolicy::Any,
        CombinationPolicy::Majority,
    ];

    #[test]
    fn truth_table() {
        for lp in [0u8, 1] {
            for veg in [0u8, 1] {
                for rep in [0u8, 1] {
                    let yes = (lp + veg + rep) as usize;
                    for p in POLICIES {
                        let expected = match p {
                            CombinationPolicy::All => yes == 3,
                            CombinationPolicy::Any => yes > 0,
                            CombinationPolicy::Majority => yes > 1,
                        } as u8;
                        let got = combine_stages(&masks(lp, veg, rep, 1), p).unwrap();
                        assert_eq!(got.values()[0], expected, "{lp}{veg}{rep} {p:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn ripening_only_is_never_paddy() {
        for p in POLICIES {
            assert_eq!(combine_stages(&masks(0, 0, 0, 1), p).unwrap().values()[0], 0);
        }
    }

    #[test]
    fn nodata_handling() {
        let n = MASK_NODATA;
        let m = combine_stages(&masks(n, 1, 1, 0), CombinationPolicy::Majority).unwrap();
        assert_eq!(m.values()[0], 1);
        let m = combine_stages(&masks(n, n, 1, 0), CombinationPolicy::Majority).unwrap();
        assert_eq!(m.values()[0], 0);
        let m = combine_stages(&masks(n, n, n, 1), CombinationPolicy::Any).unwrap();
        assert_eq!(m.values()[0], n);
        let mut partial = masks(1, 1, 1, 1);
        partial.remove(&Stage::Vegetative);
        assert!(combine_stages(&partial, CombinationPolicy::Any).is_err());
    }
}
