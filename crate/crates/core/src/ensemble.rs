//! Majority voting across per-strategy predictions.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask3D, TractLabelMap};

/// Per-voxel, per-channel vote over `K` aligned predictions.
///
/// A voxel is foreground when at least half of the models say so, so an
/// exact tie (possible for even `K`) resolves to 1.
pub fn majority_vote(predictions: &[TractLabelMap]) -> Result<TractLabelMap> {
    let first = predictions.first().ok_or(Error::Empty("majority_vote needs at least one prediction"))?;
    for p in &predictions[1..] {
        first.ensure_aligned(p)?;
    }
    let k = predictions.len();
    let mut channel = 0;
    Ok(first.map_masks(|m| {
        let mut votes = vec![0u32; m.data().len()];
        for p in predictions {
            for (v, &b) in votes.iter_mut().zip(p.mask(channel).data()) {
                *v += b as u32;
            }
        }
        channel += 1;
        let data = votes.into_iter().map(|v| 2 * v as usize >= k).collect();
        BinaryMask3D::from_vec(m.geometry().clone(), data).expect("same geometry")
    }))
}

/// The scalar rule behind [`majority_vote`].
pub fn vote(bits: &[bool]) -> bool {
    2 * bits.iter().filter(|&&b| b).count() >= bits.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn single(bits: &[bool]) -> Vec<TractLabelMap> {
        let g = Geometry::cube(1);
        bits.iter()
            .map(|&b| {
                TractLabelMap::from_pairs([("T", BinaryMask3D::from_vec(g.clone(), vec![b]).unwrap())]).unwrap()
            })
            .collect()
    }

    fn voted(bits: &[bool]) -> bool {
        majority_vote(&single(bits)).unwrap().mask(0).data()[0]
    }

    #[test]
    fn examples() {
        assert!(voted(&[true, true, false, false]));
        assert!(!voted(&[true, false, false, false]));
        assert!(voted(&[true, true, true, false]));
        assert!(!voted(&[false]));
        assert!(voted(&[true]));
        assert!(!voted(&[true, false, false]));
    }

    #[test]
    fn misaligned_rejected() {
        let g = Geometry::cube(2);
        let a = TractLabelMap::from_pairs([("A", BinaryMask3D::empty(g.clone()))]).unwrap();
        let b = TractLabelMap::from_pairs([("B", BinaryMask3D::empty(g))]).unwrap();
        assert!(majority_vote(&[a.clone(), b]).is_err());
        let c = TractLabelMap::from_pairs([("A", BinaryMask3D::empty(Geometry::cube(3)))]).unwrap();
        assert!(majority_vote(&[a, c]).is_err());
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn multi_channel_votes_independently() {
        let g = Geometry::new([2, 1, 1], [1.0; 3]).unwrap();
        let mk = |a: [bool; 2], b: [bool; 2]| {
            TractLabelMap::from_pairs([
                ("A", BinaryMask3D::from_vec(g.clone(), a.to_vec()).unwrap()),
                ("B", BinaryMask3D::from_vec(g.clone(), b.to_vec()).unwrap()),
            ])
            .unwrap()
        };
        let out = majority_vote(&[
            mk([true, false], [false, false]),
            mk([true, false], [true, false]),
            mk([false, false], [true, true]),
        ])
        .unwrap();
        assert_eq!(out.mask(0).data(), &[true, false]);
        assert_eq!(out.mask(1).data(), &[true, false]);
    }
}
