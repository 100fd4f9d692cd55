//! Analytic gradients of the retriever and reader losses against central finite differences.

mod common;

use common::{check_reader_gradients, check_retriever_gradients, reader_fixture, retriever_fixture};

#[test]
fn retriever_loss_gradients_match_finite_differences() {
    for seed in 0..20 {
        let fx = retriever_fixture(seed);
        let c = check_retriever_gradients(&fx);
        assert!(
            c.checked > 100,
            "seed {seed}: only {} parameters checked",
            c.checked
        );
        assert!(c.max_rel < 1e-4, "seed {seed}: {} (rel {:e})", c.worst, c.max_rel);
    }
}

#[test]
fn reader_loss_gradients_match_finite_differences() {
    for seed in 0..20 {
        let fx = reader_fixture(seed);
        let c = check_reader_gradients(&fx);
        assert!(
            c.checked > 50,
            "seed {seed}: only {} parameters checked",
            c.checked
        );
        assert!(c.max_rel < 1e-4, "seed {seed}: {} (rel {:e})", c.worst, c.max_rel);
    }
}

#[test]
fn distorted_examples_leave_span_heads_untouched() {
    for seed in [1u64, 5, 9, 13] {
        let fx = reader_fixture(seed);
        assert_eq!(fx.target, pathqa::supervision::ReaderTarget::Masked);
        let (_, g) = fx.reader.loss(&fx.input, fx.target, fx.label).unwrap();
        assert!(g.v_start.iter().chain(&g.v_end).all(|&x| x == 0.0));
        assert!(g.class_head.iter().all(|&x| x == 0.0));
    }
}
