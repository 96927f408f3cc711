use mplab::ctc::Vocabulary;
use mplab::lm::*;
use proptest::prelude::*;

fn vocab() -> Vocabulary {
    Vocabulary::new(["a", "b", "c", "d"]).unwrap()
}

fn corpus() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0usize..4, 0..6), 1..8)
}

fn smoothing() -> impl Strategy<Value = Smoothing> {
    prop_oneof![Just(Smoothing::WittenBell), (0.01f64..2.0).prop_map(|k| Smoothing::AddK { k })]
}

fn row_sum(m: &NgramModel, ctx: &[u32]) -> f64 {
    (0..4).chain([m.end_symbol()]).map(|w| 10f64.powf(m.log10_prob(ctx, w))).sum()
}

proptest! {
    #[test]
    fn conditional_distributions_normalize(c in corpus(), s in smoothing(), order in 1usize..4) {
        let m = train_ngram(&c, &vocab(), order, s).unwrap();
        for ctx in m.known_contexts() {
            prop_assert!((row_sum(&m, &ctx) - 1.0).abs() < 1e-9, "ctx {:?}", ctx);
        }
        prop_assert!((row_sum(&m, &[m.begin_symbol(), 3]) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sentence_score_is_sum_of_windowed_conditionals(
        c in corpus(),
        s in smoothing(),
        order in 1usize..4,
        sentence in prop::collection::vec(0usize..4, 0..8),
    ) {
        let m = train_ngram(&c, &vocab(), order, s).unwrap();
        let mut history: Vec<u32> = vec![m.begin_symbol()];
        let mut expected = 0.0;
        for w in sentence.iter().map(|&t| t as u32).chain([m.end_symbol()]) {
            let ctx = &history[history.len().saturating_sub(order - 1)..];
            let ctx = if order == 1 { &[][..] } else { ctx };
            expected += m.log10_prob(ctx, w);
            history.push(w);
        }
        let total = m.sentence_log_prob(&sentence);
        prop_assert!((total - expected * std::f64::consts::LN_10).abs() < 1e-9);
    }

    #[test]
    fn arpa_round_trip_preserves_scores(c in corpus(), s in smoothing(), order in 1usize..4) {
        let m = train_ngram(&c, &vocab(), order, s).unwrap();
        let mut bytes = Vec::new();
        write_arpa(&m, &mut bytes).unwrap();
        let back = read_arpa(&bytes[..]).unwrap();
        for sentence in &c {
            prop_assert_eq!(back.sentence_log_prob(sentence), m.sentence_log_prob(sentence));
        }
    }

    #[test]
    fn training_text_is_no_more_perplexing_than_uniform(c in corpus(), order in 1usize..4) {
        let m = train_ngram(&c, &vocab(), order, Smoothing::WittenBell).unwrap();
        let ppl = perplexity(&m, &c);
        prop_assert!(ppl.is_finite() && ppl >= 1.0);
        prop_assert!(ppl <= 5.0 + 1e-9, "perplexity {}", ppl);
    }
}
