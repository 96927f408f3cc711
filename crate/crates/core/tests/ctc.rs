use mplab::ctc::*;
use ndarray::Array2;
use proptest::prelude::*;

fn posteriors(frames: usize, classes: usize, values: &[f64]) -> FramePosteriors {
    let logits = Array2::from_shape_vec((frames, classes), values[..frames * classes].to_vec()).unwrap();
    FramePosteriors::from_logits(&logits)
}

fn sequences(tokens: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut all = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for t in 0..tokens {
                let mut e: Vec<usize> = s.clone();
                e.push(t);
                next.push(e);
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    all
}

fn logits() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..=4).prop_flat_map(|t| (Just(t), prop::collection::vec(-4.0f64..4.0, t * 3)))
}

proptest! {
    #[test]
    fn label_sequence_probabilities_sum_to_one((t, values) in logits()) {
        let post = posteriors(t, 3, &values);
        let total: f64 = sequences(2, t)
            .iter()
            .map(|s| ctc_log_likelihood(&post, s).unwrap().exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "total {}", total);
    }

    #[test]
    fn loss_is_non_negative_and_gradient_rows_sum_to_zero(
        (t, values) in logits(),
        target in prop::collection::vec(0usize..2, 0..3),
    ) {
        let post = posteriors(t, 3, &values);
        match ctc_loss_and_grad(&post, &target) {
            Ok(l) => {
                prop_assert!(l.loss >= -1e-12);
                prop_assert!((l.loss + ctc_log_likelihood(&post, &target).unwrap()).abs() < 1e-9);
                for row in l.grad.rows() {
                    prop_assert!(row.sum().abs() < 1e-9);
                }
            }
            Err(CtcError::Unreachable { .. }) => {
                prop_assert_eq!(ctc_log_likelihood(&post, &target).unwrap(), f64::NEG_INFINITY);
            }
            Err(e) => prop_assert!(false, "{}", e),
        }
    }

    #[test]
    fn collapse_drops_blanks_and_never_grows(alignment in prop::collection::vec(0usize..3, 0..12)) {
        let out = collapse(&alignment, 2).unwrap();
        prop_assert!(out.len() <= alignment.len());
        prop_assert!(out.iter().all(|&id| id < 2));
        prop_assert_eq!(collapse(&alignment, 2).unwrap(), out);
    }

    #[test]
    fn exact_beam_search_finds_the_map_sequence((t, values) in logits()) {
        let post = posteriors(t, 3, &values);
        let vocab = Vocabulary::new(["a", "b"]).unwrap();
        let cfg = BeamConfig {
            beam_size: 1000,
            prune_threshold: f64::INFINITY,
            lm_weight: 0.0,
            insertion_bonus: 0.0,
            nbest: 1,
        };
        let top = &prefix_beam_search(&post, &vocab, &cfg, None).unwrap()[0];
        let best = sequences(2, t)
            .iter()
            .map(|s| ctc_log_likelihood(&post, s).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((top.ctc_score - best).abs() < 1e-9);
        let greedy = best_path_decode(&post);
        prop_assert!(top.ctc_score >= ctc_log_likelihood(&post, &greedy).unwrap() - 1e-12);
    }

    #[test]
    fn render_and_parse_round_trip(labels in prop::collection::vec(0usize..4, 0..10)) {
        let vocab = Vocabulary::new(["ba", "de", "ki", "lo"]).unwrap();
        prop_assert_eq!(vocab.parse(&vocab.render(&labels)).unwrap(), labels);
    }
}
