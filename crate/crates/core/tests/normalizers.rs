use oasis_core::normalize::{jacobian, kink_margin, normalize, vjp};
use oasis_core::{NormalizerKind, NormalizerSpec};
use proptest::prelude::*;

fn spec(kind: NormalizerKind) -> NormalizerSpec {
    NormalizerSpec::new(kind)
}

fn row() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..10).prop_flat_map(|n| {
        (
            prop::collection::vec(-8.0f64..8.0, n),
            prop::collection::vec(any::<bool>(), n),
            0..n,
        )
            .prop_map(|(z, mut vis, keep)| {
                vis[keep] = true;
                (z, vis)
            })
    })
}

fn kind() -> impl Strategy<Value = NormalizerKind> {
    prop::sample::select(NormalizerKind::ALL.to_vec())
}

proptest! {
    #[test]
    fn weights_form_a_distribution((z, vis) in row(), k in kind()) {
        let s = spec(k);
        let w = normalize(&s, &z, &vis).unwrap();
        for (p, v) in w.probs.iter().zip(&vis) {
            prop_assert!(*p >= 0.0);
            if !v {
                prop_assert_eq!(*p, 0.0);
            }
        }
        prop_assert!(w.null_mass >= 0.0);
        if k != NormalizerKind::ClippedSoftmax {
            prop_assert!((w.real_mass() + w.null_mass - 1.0).abs() < 1e-12);
        } else {
            prop_assert!(w.real_mass() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn shift_invariant_without_null((z, vis) in row(), c in -20.0f64..20.0, k in kind()) {
        prop_assume!(k != NormalizerKind::Softmax1);
        let s = spec(k);
        let a = normalize(&s, &z, &vis).unwrap();
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        let b = normalize(&s, &shifted, &vis).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn vjp_is_transposed_jacobian(
        (z, vis) in row(),
        k in kind(),
        seed in prop::collection::vec(-1.0f64..1.0, 10),
        g_null in -1.0f64..1.0,
    ) {
        let s = spec(k);
        let n = z.len();
        let g = &seed[..n];
        let jac = jacobian(&s, &z, &vis).unwrap();
        let dz = vjp(&s, &z, &vis, g, g_null).unwrap();
        for j in 0..n {
            let mut expect: f64 = (0..n).map(|i| g[i] * jac.at(&[i, j])).sum();
            if k == NormalizerKind::Softmax1 {
                let col: f64 = (0..n).map(|i| jac.at(&[i, j])).sum();
                expect -= g_null * col;
            }
            prop_assert!((dz[j] - expect).abs() < 1e-10, "slot {}: {} vs {}", j, dz[j], expect);
        }
    }

    #[test]
    fn jacobian_matches_differences_away_from_kinks((z, vis) in row(), k in kind()) {
        let s = spec(k);
        let h = 1e-6;
        prop_assume!(kink_margin(&s, &z, &vis).unwrap() > 1e-3);
        let jac = jacobian(&s, &z, &vis).unwrap();
        for j in (0..z.len()).filter(|&j| vis[j]) {
            let (mut up, mut dn) = (z.clone(), z.clone());
            up[j] += h;
            dn[j] -= h;
            let pu = normalize(&s, &up, &vis).unwrap().probs;
            let pd = normalize(&s, &dn, &vis).unwrap().probs;
            for i in 0..z.len() {
                let fd = (pu[i] - pd[i]) / (2.0 * h);
                prop_assert!((fd - jac.at(&[i, j])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_precision_tracks_double((z, vis) in row(), k in kind()) {
        let s = spec(k);
        let a = normalize(&s, &z, &vis).unwrap();
        let z32: Vec<f32> = z.iter().map(|&x| x as f32).collect();
        let b = normalize(&s, &z32, &vis).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            prop_assert!((x - *y as f64).abs() < 1e-4);
        }
    }
}

#[test]
fn fully_masked_rows_need_a_null_slot() {
    for k in NormalizerKind::ALL {
        let r = normalize(&spec(k), &[1.0, 2.0], &[false, false]);
        if k == NormalizerKind::Softmax1 {
            assert_eq!(r.unwrap().null_mass, 1.0);
        } else {
            assert!(r.is_err(), "{}", k.name());
        }
    }
}

#[test]
fn mask_length_mismatch_is_rejected() {
    assert!(normalize(&spec(NormalizerKind::Softmax), &[1.0, 2.0], &[true]).is_err());
}

#[test]
fn sparse_normalizers_reach_exact_zeros() {
    let z = [3.0, 0.0, -1.0];
    for k in [NormalizerKind::Sparsemax, NormalizerKind::Entmax15] {
        let w = normalize(&spec(k), &z, &[true; 3]).unwrap();
        assert_eq!(w.probs[2], 0.0, "{}", k.name());
    }
}
