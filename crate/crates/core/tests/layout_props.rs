//! Property tests for tensor layout operations and the token-structure
//! rearrangement, checked against direct index arithmetic.

use proptest::prelude::*;
use swat_core::tokenizer::{self, StructureDescriptor, TokenGrid};
use swat_core::Tensor;

fn counting(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|v| v as f64).collect()).unwrap()
}

proptest! {
    #[test]
    fn permute_then_inverse_is_identity(a in 1usize..4, b in 1usize..4, c in 1usize..4, which in 0usize..6) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[which];
        let mut inv = [0; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let t = counting(&[a, b, c]);
        let back = t.permute(&perm).unwrap().permute(&inv).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn permute_moves_every_element(a in 1usize..4, b in 1usize..4, c in 1usize..4) {
        let t = counting(&[a, b, c]);
        let p = t.permute(&[2, 0, 1]).unwrap();
        prop_assert_eq!(p.shape(), &[c, a, b]);
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    prop_assert_eq!(p.get(&[k, i, j]), t.get(&[i, j, k]));
                }
            }
        }
    }

    #[test]
    fn restructure_round_trips(b in 1usize..3, c in 1usize..4, alpha in 1usize..4, ht in 1usize..4, wt in 1usize..4) {
        let x = counting(&[b, c, ht * alpha, wt * alpha]);
        let desc = StructureDescriptor::new(alpha, alpha, c * alpha * alpha).unwrap();
        let grid = tokenizer::restructure(&x, &desc).unwrap();
        prop_assert_eq!(grid.data.shape(), &[b, ht, wt, c * alpha * alpha]);
        prop_assert_eq!(tokenizer::unrestructure(&grid).unwrap(), x);
    }

    #[test]
    fn decode_inverts_encode(p_over in 1usize..4, alpha in 1usize..5, c in 1usize..5) {
        let desc = StructureDescriptor::new(p_over * alpha, alpha, c * alpha * alpha).unwrap();
        for k in 0..desc.embed() {
            let (ch, i, j) = desc.decode(k);
            prop_assert!(ch < desc.c && i < desc.h && j < desc.w);
            prop_assert_eq!(desc.encode(ch, i, j), k);
        }
    }

    #[test]
    fn sequence_view_round_trips(b in 1usize..3, ht in 1usize..4, wt in 1usize..4) {
        let desc = StructureDescriptor::new(4, 2, 8).unwrap();
        let grid = TokenGrid::new(counting(&[b, ht, wt, 8]), desc).unwrap();
        let seq = grid.to_sequence();
        prop_assert_eq!(seq.shape(), &[b, ht * wt, 8]);
        let back = TokenGrid::from_sequence(&seq, (ht, wt), desc).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn index_select_gathers_rows(n in 1usize..6, seed in 0u64..1000) {
        let t = counting(&[2, n, 3]);
        let mut rng = swat_core::rng::seeded(seed);
        let perm = swat_core::rng::permutation(&mut rng, n);
        let s = t.index_select(1, &perm).unwrap();
        for b in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                for c in 0..3 {
                    prop_assert_eq!(s.get(&[b, dst, c]), t.get(&[b, src, c]));
                }
            }
        }
    }
}

#[test]
fn decode_rule_hand_example() {
    // p=8, alpha=4, C=32 → c=2, h=w=4; k = c'·16 + i·4 + j
    let desc = StructureDescriptor::new(8, 4, 32).unwrap();
    assert_eq!((desc.c, desc.h, desc.w), (2, 4, 4));
    assert_eq!(desc.decode(0), (0, 0, 0));
    assert_eq!(desc.decode(5), (0, 1, 1));
    assert_eq!(desc.decode(16), (1, 0, 0));
    assert_eq!(desc.decode(31), (1, 3, 3));
}

#[test]
fn restructure_hand_example() {
    // one channel, 4×4 map, alpha 2: token (0,1) holds pixels (0,2),(0,3),(1,2),(1,3)
    let x = counting(&[1, 1, 4, 4]);
    let desc = StructureDescriptor::new(2, 2, 4).unwrap();
    let grid = tokenizer::restructure(&x, &desc).unwrap();
    let token: Vec<f64> = (0..4).map(|k| grid.data.get(&[0, 0, 1, k])).collect();
    assert_eq!(token, vec![2.0, 3.0, 6.0, 7.0]);
}

#[test]
fn bad_descriptors_are_rejected() {
    assert!(StructureDescriptor::new(16, 3, 192).is_err());
    assert!(StructureDescriptor::new(16, 8, 100).is_err());
    assert!(StructureDescriptor::new(16, 0, 192).is_err());
}
