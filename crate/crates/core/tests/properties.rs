//! Property tests for the structural invariants.

use proptest::prelude::*;

use mtsk_core::connectome::{connectivity_features, connectivity_from_features};
use mtsk_core::stgcn::{vote, VoteKind};
use mtsk_core::transport::histogram;
use mtsk_core::Tensor;

fn symmetric_matrix(p: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-1.0f64..1.0, p * (p + 1) / 2).prop_map(move |upper| {
        connectivity_from_features(&upper, p).unwrap()
    })
}

proptest! {
    #[test]
    fn connectivity_roundtrip_is_identity(a in (2usize..9).prop_flat_map(symmetric_matrix)) {
        let p = a.shape()[0];
        let features = connectivity_features(&a).unwrap();
        prop_assert_eq!(features.len(), p * (p + 1) / 2);
        let back = connectivity_from_features(&features, p).unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn mean_vote_is_bounded_and_order_free(
        probs in proptest::collection::vec(0.0f64..=1.0, 1..12),
        rotation in 0usize..12,
    ) {
        let v = vote(&probs, VoteKind::Mean).unwrap();
        let lo = probs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        let mut rotated = probs.clone();
        rotated.rotate_left(rotation % probs.len());
        prop_assert_eq!(vote(&rotated, VoteKind::Mean).unwrap(), v);
    }

    #[test]
    fn histogram_mass_is_normalized(
        values in proptest::collection::vec(-100.0f64..100.0, 1..300),
        bins in 1usize..40,
    ) {
        let h = histogram(&values, bins).unwrap();
        prop_assert!((h.total_mass() - 1.0).abs() < 1e-12);
        for bin in &h.bins {
            prop_assert!(bin.mass > 0.0);
            prop_assert!(bin.lo <= bin.representative && bin.representative <= bin.hi);
        }
    }
}
