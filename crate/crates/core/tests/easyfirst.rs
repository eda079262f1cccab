use easyfirst_core::easyfirst::{
    apply_prediction, decode, decode_batch, eos_postprocess, DecodeOptions, DecodeState, ProbTable,
};
use easyfirst_core::stub::{
    peaked_table, table_from_spec, OraclePredictor, RandomPredictor, ScriptedPredictor,
};
use easyfirst_core::vocab::EOS;
use proptest::prelude::*;

mod common;
use common::check_invariants;

const FIRST: &str = "c:0.9 a:0.5 b:0.8 #:0.7 x:0.3 #:0.6";
const SECOND: &str = "c:0.9 a:0.4 b:0.8 #:0.7 x:0.3 #:0.6";
const STEADY: &str = "c:0.9 a:0.5 b:0.8 #:0.7 #:0.2 #:0.6";

fn golden(name: &str) -> String {
    std::fs::read_to_string(format!(
        "{}/tests/golden/{name}",
        env!("CARGO_MANIFEST_DIR")
    ))
    .unwrap()
}

fn scripted(specs: &[&str]) -> ScriptedPredictor {
    ScriptedPredictor {
        tables: specs.iter().map(|s| table_from_spec(s).unwrap()).collect(),
    }
}

#[test]
fn golden_trace_single_iteration() {
    let out = decode(&mut scripted(&[FIRST]), DecodeOptions::new(6, 1)).unwrap();
    assert_eq!(out.trace.to_jsonl(), golden("trace_k1.jsonl"));
    assert_eq!(out.text, "cab");
    assert_eq!(out.passes, 1);
}

#[test]
fn golden_trace_two_iterations() {
    let out = decode(&mut scripted(&[FIRST, SECOND]), DecodeOptions::new(6, 2)).unwrap();
    assert_eq!(out.trace.to_jsonl(), golden("trace_k2.jsonl"));
    assert_eq!(out.text, "cab");
}

#[test]
fn golden_trace_one_commit_per_iteration() {
    let out = decode(&mut scripted(&[STEADY; 6]), DecodeOptions::new(6, 6)).unwrap();
    assert_eq!(out.trace.to_jsonl(), golden("trace_k6.jsonl"));
    assert!(out.trace.steps.iter().all(|s| s.committed.len() == 1));
    assert_eq!(out.passes, 4);
}

#[test]
fn single_iteration_is_parallel_argmax() {
    let table = table_from_spec(FIRST).unwrap();
    let state = DecodeState::new(6);
    let pred = apply_prediction(&state, table.clone());
    let out = decode(&mut scripted(&[FIRST]), DecodeOptions::new(6, 1)).unwrap();
    let mut expected = DecodeState::new(6);
    expected.tokens = pred.tokens.clone();
    expected.committed = vec![true; 6];
    let (cut, _) = eos_postprocess(&expected);
    assert_eq!(out.state.tokens, cut.tokens);
    for t in 0..6 {
        assert_eq!(pred.tokens[t], table.argmax(t).0);
    }
}

#[test]
fn without_postprocessing_all_non_eos_tokens_are_kept() {
    let mut options = DecodeOptions::new(6, 1);
    options.eos_postprocess = false;
    let out = decode(&mut scripted(&[FIRST]), options).unwrap();
    assert_eq!(out.state.eos_cut, None);
    assert_eq!(out.text, "cabx");
}

#[test]
fn probabilities_are_recorded_on_request() {
    let mut options = DecodeOptions::new(6, 2);
    options.record_probabilities = true;
    let out = decode(&mut scripted(&[FIRST, SECOND]), options).unwrap();
    let probs = out.trace.steps[0].probabilities.as_ref().unwrap();
    assert_eq!(probs.len(), 6);
    assert!((probs[0][12] - 0.9).abs() < 1e-15);
    assert!(out.trace.to_jsonl().contains("\"probabilities\""));
}

#[test]
fn empty_output_when_eos_is_first() {
    let out = decode(
        &mut scripted(&["#:0.9 a:0.2 b:0.2"]),
        DecodeOptions::new(3, 1),
    )
    .unwrap();
    assert_eq!(out.text, "");
    assert_eq!(out.state.eos_cut, Some(0));
}

#[test]
fn oracle_recognizes_every_label() {
    let labels = ["a", "hello", "0123456789", "zz9"];
    let mut oracle = OraclePredictor::new(&labels, 30).unwrap();
    for k in [1, 2, 3, 5, 10, 30] {
        let outs = decode_batch(&mut oracle, labels.len(), DecodeOptions::new(30, k)).unwrap();
        let texts: Vec<&str> = outs.iter().map(|o| o.text.as_str()).collect();
        assert_eq!(texts, labels, "K={k}");
    }
}

#[test]
fn rejects_out_of_range_iterations() {
    assert!(decode(&mut RandomPredictor { seed: 0 }, DecodeOptions::new(30, 0)).is_err());
    assert!(decode(&mut RandomPredictor { seed: 0 }, DecodeOptions::new(30, 31)).is_err());
    assert!(ProbTable::new(2, vec![0.0; 37]).is_err());
}

#[test]
fn deterministic_traces() {
    let a = decode(&mut RandomPredictor { seed: 5 }, DecodeOptions::new(30, 5)).unwrap();
    let b = decode(&mut RandomPredictor { seed: 5 }, DecodeOptions::new(30, 5)).unwrap();
    assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
}

#[test]
fn invariants_over_many_random_stub_decodes() {
    for seed in 0..250u64 {
        for (len, k) in [(30, 5), (30, 1), (30, 30), (7, 3)] {
            check_invariants(seed, len, k, true).unwrap();
        }
    }
}

proptest! {
    #[test]
    fn invariants_hold_for_any_schedule(seed in any::<u64>(), len in 1usize..31, frac in 0.0f64..1.0, pp in any::<bool>()) {
        let k = 1 + ((len - 1) as f64 * frac) as usize;
        if let Err(e) = check_invariants(seed, len, k, pp) {
            return Err(TestCaseError::fail(e));
        }
    }

    #[test]
    fn committed_positions_never_change(seed in any::<u64>(), k in 1usize..31) {
        let out = decode(&mut RandomPredictor { seed }, DecodeOptions::new(30, k)).unwrap();
        let mut prev: Option<Vec<char>> = None;
        for step in &out.trace.steps {
            let cur: Vec<char> = step.tokens.chars().collect();
            if let Some(p) = &prev {
                for t in 0..30 {
                    // Only EOS post-processing may rewrite a committed
                    // position, and only beyond the cut.
                    if p[t] != '_' && step.eos_cut.is_none_or(|c| t <= c) {
                        prop_assert_eq!(p[t], cur[t]);
                    }
                }
            }
            prev = Some(cur);
        }
    }
}

#[test]
fn peaked_tables_have_unit_rows() {
    let t = peaked_table(&[(3, 0.25), (EOS, 0.9)]);
    for r in 0..2 {
        assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn full_schedule_runs_every_pass_without_changing_the_result() {
    for seed in 0..50 {
        let early = decode(&mut RandomPredictor { seed }, DecodeOptions::new(30, 5)).unwrap();
        let mut options = DecodeOptions::new(30, 5);
        options.early_stop = false;
        let full = decode(&mut RandomPredictor { seed }, options).unwrap();
        assert_eq!(full.passes, 5);
        assert_eq!(full.trace.len(), 5);
        assert_eq!(full.text, early.text);
        assert_eq!(full.state.tokens, early.state.tokens);
        assert!(full.trace.steps[early.passes..]
            .iter()
            .all(|s| s.committed.is_empty()));
    }
}

#[test]
fn truncating_at_the_eos_cut_changes_no_computed_row() {
    use easyfirst_core::datagen::{generate, RenderConfig, Split};
    use easyfirst_core::easyfirst::{ModelPredictor, ParallelPredictor};
    use easyfirst_core::{Model, ModelConfig};

    let config = ModelConfig {
        conv_channels: [4, 8],
        d_model: 16,
        heads: 2,
        d_ffn: 32,
        backbone_units: 1,
        decoder_units: 2,
        max_len: 12,
        ..ModelConfig::default()
    };
    let (model, params) = Model::<f64>::build(&config, 21).unwrap();
    let samples = generate(3, Split::Test, 3, &RenderConfig::default(), 32, 128).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let mut states = Vec::new();
    for (i, cut) in [Some(0), Some(5), None].into_iter().enumerate() {
        let mut state = DecodeState::new(12);
        for t in 0..12 {
            if (t + i) % 3 == 0 {
                state.tokens[t] = t % 10;
                state.committed[t] = true;
            }
        }
        if let Some(c) = cut {
            for t in c..12 {
                state.tokens[t] = EOS;
                state.committed[t] = true;
            }
            state.eos_cut = Some(c);
        }
        states.push(state);
    }
    let views: Vec<&DecodeState> = states.iter().collect();
    let mut short = ModelPredictor::new(&model, &params, &refs).unwrap();
    let mut full = ModelPredictor::new(&model, &params, &refs).unwrap();
    full.truncate_at_cut(false);
    let a = short.predict(&[0, 1, 2], &views).unwrap();
    let b = full.predict(&[0, 1, 2], &views).unwrap();
    for (state, (x, y)) in states.iter().zip(a.iter().zip(&b)) {
        let kept = state.eos_cut.map_or(12, |c| c + 1);
        for t in 0..12 {
            if t < kept {
                assert_eq!(x.row(t), y.row(t), "row {t}");
            } else {
                assert_eq!(x.argmax(t), (EOS, 1.0));
            }
        }
    }
    // Whole decodes agree as well.
    for k in [1, 3, 12] {
        let mut short = ModelPredictor::new(&model, &params, &refs).unwrap();
        let mut full = ModelPredictor::new(&model, &params, &refs).unwrap();
        full.truncate_at_cut(false);
        let a = decode_batch(&mut short, 3, DecodeOptions::new(12, k)).unwrap();
        let b = decode_batch(&mut full, 3, DecodeOptions::new(12, k)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.state.tokens, y.state.tokens);
            assert_eq!(x.state.confidence, y.state.confidence);
        }
    }
}
