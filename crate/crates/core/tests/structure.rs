use cstr_core::gcs::gate;
use cstr_core::model::{CstrModel, ModelConfig};
use cstr_core::point::select_points;
use cstr_core::tensor::{Mode, ParamStore, Session, Tensor};
use cstr_validation::invariants::{self, run};
use proptest::prelude::*;

#[test]
fn attention_rows_are_distributions_and_gates_are_open_interval() {
    invariants::attention_and_gate().unwrap();
}

#[test]
fn zero_gate_passes_tokens_through() {
    invariants::zero_gate_identity().unwrap();
}

#[test]
fn zero_initialised_gate_is_one_half() {
    invariants::zero_init_gate_is_half().unwrap();
}

#[test]
fn point_refinement_is_sparse() {
    invariants::point_sparsity().unwrap();
}

#[test]
fn zero_initialised_point_head_is_a_no_op() {
    invariants::zero_init_point_head_is_no_op().unwrap();
}

#[test]
fn structural_buffer_is_consulted_exactly_once() {
    invariants::single_fuse().unwrap();
}

#[test]
fn lattice_is_four_by_four_at_sixty_four() {
    let model: CstrModel<f64> = CstrModel::new(ModelConfig::default(), 0).unwrap();
    run(&model, Mode::Eval, 0, |s, out| {
        assert_eq!(s.value(out.t0).shape(), &[2, 32, 4, 4]);
        assert_eq!(s.value(out.t3).shape(), &[2, 32, 4, 4]);
        assert_eq!(s.value(out.logits).shape(), &[2, 6, 64, 64]);
    });
}

#[test]
fn manual_gate_with_zero_weights_is_one_half() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::full(&[1, 3, 4], 0.7), false);
    let w = store.add("w", Tensor::zeros(&[4, 4]), false);
    let mut s = Session::new(&store, Mode::Eval);
    let (xv, wv) = (s.param(x), s.param(w));
    let g = gate(&mut s, &[(xv, wv), (xv, wv)], None).unwrap();
    assert!(s.value(g).data().iter().all(|&v| v == 0.5));
}

proptest! {
    #[test]
    fn selection_takes_the_smallest_margins(margins in proptest::collection::vec(0.0f64..4.0, 1..80), k in 0usize..90) {
        let w = 8;
        let set = select_points(&margins, w, k);
        prop_assert_eq!(set.len(), k.min(margins.len()));
        let chosen: Vec<usize> = set.indices.iter().map(|&(y, x)| y * w + x).collect();
        let worst = set.margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (i, &m) in margins.iter().enumerate() {
            if !chosen.contains(&i) {
                prop_assert!(m >= worst);
            }
        }
        prop_assert!(set.margins.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn gate_stays_inside_the_unit_interval(vals in proptest::collection::vec(-30.0f64..30.0, 12), wv in proptest::collection::vec(-3.0f64..3.0, 16)) {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::new(&[1, 3, 4], vals).unwrap(), false);
        let w = store.add("w", Tensor::new(&[4, 4], wv).unwrap(), false);
        let mut s = Session::new(&store, Mode::Eval);
        let (xv, wvv) = (s.param(x), s.param(w));
        let g = gate(&mut s, &[(xv, wvv)], None).unwrap();
        prop_assert!(s.value(g).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
