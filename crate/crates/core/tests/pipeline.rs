mod common;

use common::*;
use kgclip_core::eval::{fuse, mm_similarity, tri_similarity, Provenance, SimilarityMatrix};
use kgclip_core::graph::{EntityId, Relation};
use kgclip_core::model::{DistanceMode, ModelConfig, TripletModel};
use kgclip_core::objectives::{mm_contrastive_loss, triplet_kl_loss, LossOptions, PositiveMask};
use kgclip_core::rng::SplitMix64;
use kgclip_core::Tape;

fn ids(prefix: &str, n: usize) -> Vec<EntityId> {
    (0..n)
        .map(|i| {
            if prefix == "v" {
                EntityId::video(format!("v{i}")).unwrap()
            } else {
                EntityId::action(format!("a{i}")).unwrap()
            }
        })
        .collect()
}

#[test]
fn encoder_matches_straight_line_oracle() {
    let model = busy_model(8, 2, 2, 1);
    let mut rng = SplitMix64::new(2);
    for _ in 0..5 {
        let (h, r, t) = (rand_vec(8, &mut rng), rand_vec(16, &mut rng), rand_vec(8, &mut rng));
        let got = model.triplet_encode(&h, &r, &t).unwrap();
        let want = encode(&model, &h, &r, &t);
        for (g, w) in got.iter().zip(&want) {
            for (a, b) in g.iter().zip(w) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn tri_similarity_matches_composition_oracle() {
    let model = busy_model(8, 4, 3, 3);
    let mut rng = SplitMix64::new(4);
    let (v, a) = (rand_mat(3, 8, &mut rng), rand_mat(4, 8, &mut rng));
    let s = tri_similarity(&model, &ids("v", 3), &to_tensor(&v), &ids("a", 4), &to_tensor(&a)).unwrap();
    let want = common::tri_similarity(&model, &v, &a);
    for i in 0..3 {
        for j in 0..4 {
            assert!((s.get(i, j) - want[i][j]).abs() < 1e-10);
        }
    }
    assert_eq!(s.provenance(), Provenance::Tri);
}

#[test]
fn mm_similarity_matches_loop_oracle_and_is_scale_invariant() {
    let mut rng = SplitMix64::new(5);
    let (v, a) = (rand_mat(5, 6, &mut rng), rand_mat(3, 6, &mut rng));
    let s = mm_similarity(&ids("v", 5), &to_tensor(&v), &ids("a", 3), &to_tensor(&a)).unwrap();
    let want = common::mm_similarity(&v, &a);
    let scaled: Mat = v.iter().enumerate().map(|(i, r)| r.iter().map(|x| x * (1.0 + i as f64)).collect()).collect();
    let s2 = mm_similarity(&ids("v", 5), &to_tensor(&scaled), &ids("a", 3), &to_tensor(&a)).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            assert!((s.get(i, j) - want[i][j]).abs() < 1e-12);
            assert!((s.get(i, j) - s2.get(i, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_configuration_reduces_tri_to_mm() {
    let model = TripletModel::identity(ModelConfig::for_dim(8), 11).unwrap();
    let mut rng = SplitMix64::new(6);
    let (v, a) = (rand_mat(6, 8, &mut rng), rand_mat(4, 8, &mut rng));
    let (vt, at) = (to_tensor(&v), to_tensor(&a));
    let tri = tri_similarity(&model, &ids("v", 6), &vt, &ids("a", 4), &at).unwrap();
    let mm = mm_similarity(&ids("v", 6), &vt, &ids("a", 4), &at).unwrap();
    assert!(tri.values().max_abs_diff(mm.values()) < 1e-12);
    // Symmetric inputs score 1.
    let same = tri_similarity(&model, &ids("v", 4), &at, &ids("a", 4), &at).unwrap();
    for i in 0..4 {
        assert!((same.get(i, i) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn fusion_preserves_shared_argmax() {
    let mut rng = SplitMix64::new(7);
    for _ in 0..50 {
        let a = rand_mat(1, 5, &mut rng);
        let mut b = rand_mat(1, 5, &mut rng);
        let best = (0..5).max_by(|&i, &j| a[0][i].total_cmp(&a[0][j])).unwrap();
        b[0][best] = 1.5; // make both rows agree on the argmax
        let sa = SimilarityMatrix::new(ids("v", 1), ids("a", 5), to_tensor(&a), Provenance::Mm).unwrap();
        let sb = SimilarityMatrix::new(ids("v", 1), ids("a", 5), to_tensor(&b), Provenance::Tri).unwrap();
        assert_eq!(fuse(&sa, &sb).unwrap().ranking(0)[0], best);
    }
}

#[test]
fn mm_loss_matches_direct_formula() {
    let mut rng = SplitMix64::new(8);
    let (x, y) = (rand_mat(4, 5, &mut rng), rand_mat(4, 5, &mut rng));
    let keys = [0, 1, 1, 2];
    let mask = PositiveMask::from_keys(&keys, &keys);
    let mut t = Tape::new();
    let (xv, yv) = (t.constant(to_tensor(&x)), t.constant(to_tensor(&y)));
    let opts = LossOptions { tau: 0.3, ..LossOptions::default() };
    let l = mm_contrastive_loss(&mut t, xv, yv, &mask, &opts).unwrap();
    let want = mm_loss(&x, &y, &|i, j| keys[i] == keys[j], 0.3);
    assert!((t.value(l).item() - want).abs() < 1e-10);
}

#[test]
fn triplet_loss_with_a_shared_tail_matches_oracle() {
    let model = busy_model(8, 2, 1, 9);
    let mut rng = SplitMix64::new(10);
    let heads = rand_mat(4, 8, &mut rng);
    let tail = rand_vec(8, &mut rng);
    let tails: Mat = vec![tail; 4];
    let mask = PositiveMask::new(4, 4, |_, _| true);
    let mut t = Tape::new();
    let bound = model.bind(&mut t, false);
    let (hv, tv) = (t.constant(to_tensor(&heads)), t.constant(to_tensor(&tails)));
    let opts = LossOptions { tau: 0.5, ..LossOptions::default() };
    let l = triplet_kl_loss(&mut t, &bound, Relation::MovementAction, hv, tv, &mask, &opts).unwrap();
    let want = triplet_loss(&model, Relation::MovementAction, &heads, &tails, &|_, _| true, 0.5);
    assert!((t.value(l).item() - want).abs() < 1e-10);
}

#[test]
fn score_triplet_matches_oracle_in_both_modes() {
    let model = busy_model(8, 2, 2, 12);
    let mut rng = SplitMix64::new(13);
    for rel in Relation::ALL {
        let (h, t) = (rand_vec(8, &mut rng), rand_vec(8, &mut rng));
        let got = model.score_triplet(&h, rel, &t, DistanceMode::Cosine).unwrap();
        assert!((got - score(&model, &h, rel, &t)).abs() < 1e-10);
        let (a, b) = project(&model, &h, rel, &t);
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let got = model.score_triplet(&h, rel, &t, DistanceMode::Euclidean).unwrap();
        assert!((got + dist).abs() < 1e-10);
    }
}
