use proptest::prelude::*;

use echoagent_core::agent::{EventKind, Session, SessionEnv, SessionStatus};
use echoagent_core::bench::{feasibility_metrics, frame_mae, tool_metrics, ToolSamples};
use echoagent_core::domain::{FeasibilityVector, MeasurementKind};
use echoagent_core::gateway::ScriptedBackend;
use echoagent_core::guidelines::reference_index;
use echoagent_core::sim::{generate_benchmark, generate_study, DifficultyMix, SimConfig, Template};
use echoagent_core::tools::{oracle_registry, ToolFlags};
use echoagent_core::vision::NoiseProfile;

const STEP_TEXTS: [&str; 4] = [
    r#"{"name":"detect_phases","arguments":{}}"#,
    r#"{"name":"measure","arguments":{"kind":"IVS","frame":2}}"#,
    r#"{"name":"search_guideline","arguments":{"query":"septal thickness"}}"#,
    r#"{"name":"no_such_tool","arguments":{}}"#,
];

fn feasibility() -> impl Strategy<Value = FeasibilityVector> {
    any::<u16>().prop_map(FeasibilityVector::from_bits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn finished_trace_has_three_events_per_step(picks in proptest::collection::vec(0usize..4, 0..10), budget in 10u32..16, index in 0u64..200) {
        let (study, _) = generate_study(&SimConfig::default(), index).unwrap();
        let registry = oracle_registry(&NoiseProfile::zero(1), ToolFlags::FULL);
        let g = reference_index();
        let backend = ScriptedBackend::steps(picks.iter().map(|i| STEP_TEXTS[*i]), "Done.");
        let env = SessionEnv { study: &study, guidelines: Some(&g), registry: &registry, backend: &backend };
        let mut s = Session::new("p", "What is the IVS?", budget, env).unwrap();
        let st = s.run().unwrap();
        let steps = picks.len();
        prop_assert_eq!(st.status, SessionStatus::Finished);
        prop_assert_eq!(st.history.len(), steps);
        prop_assert_eq!(st.events.len(), 3 * steps + 3);
        prop_assert_eq!(st.round_trips as usize, steps + 2);
        prop_assert_eq!(st.events.last().map(|e| e.kind), Some(EventKind::Finish));
        prop_assert!(st.events.iter().enumerate().all(|(i, e)| e.seq == i as u64));
    }

    #[test]
    fn budget_bounds_every_session(budget in 1u32..20, pick in 0usize..4) {
        let (study, _) = generate_study(&SimConfig::default(), 3).unwrap();
        let registry = oracle_registry(&NoiseProfile::zero(1), ToolFlags::FULL);
        let backend = ScriptedBackend::repeating(STEP_TEXTS[pick], "Out of steps.");
        let env = SessionEnv { study: &study, guidelines: None, registry: &registry, backend: &backend };
        let mut s = Session::new("p", "What is the IVS?", budget, env).unwrap();
        let st = s.run().unwrap();
        prop_assert_eq!(st.status, SessionStatus::BudgetExhausted);
        prop_assert_eq!(st.history.len(), budget as usize);
        prop_assert_eq!(st.round_trips, budget + 1);
        prop_assert_eq!(st.events.len(), 3 * budget as usize + 2);
        prop_assert_eq!(st.events.last().map(|e| e.kind), Some(EventKind::ForcedAnswer));
    }

    #[test]
    fn self_comparison_is_perfect(labels in proptest::collection::vec(feasibility(), 1..40), frames in proptest::collection::vec(proptest::collection::vec(0u32..200, 1..4), 1..10)) {
        let samples = ToolSamples {
            measurements: labels.iter().enumerate().map(|(i, _)| (MeasurementKind::Ivs, i as f64 * 0.1)).collect(),
            feasibility: labels.clone(),
            ed_frames: frames.clone(),
            es_frames: frames,
        };
        let m = tool_metrics(&samples, &samples).unwrap();
        prop_assert!(m.measurement.values().all(|k| k.mae_cm == 0.0));
        prop_assert_eq!(m.ed.unwrap().mae_frames, 0.0);
        let f = feasibility_metrics(&labels, &labels);
        prop_assert!(f.per_kind.values().all(|c| c.fp == 0 && c.fn_ == 0));
        if labels.iter().any(|v| v.kinds().next().is_some()) {
            prop_assert_eq!(f.micro.f1, 1.0);
            prop_assert_eq!(f.macro_avg.f1, 1.0);
        }
    }

    #[test]
    fn f1_stays_in_unit_interval(pairs in proptest::collection::vec((feasibility(), feasibility()), 1..60)) {
        let (p, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let f = feasibility_metrics(&p, &t);
        for prf in [f.micro, f.macro_avg] {
            prop_assert!((0.0..=1.0).contains(&prf.f1));
            prop_assert!((0.0..=1.0).contains(&prf.precision));
            prop_assert!((0.0..=1.0).contains(&prf.recall));
        }
        let tp: u64 = f.per_kind.values().map(|c| c.tp).sum();
        let fp: u64 = f.per_kind.values().map(|c| c.fp).sum();
        let fn_: u64 = f.per_kind.values().map(|c| c.fn_).sum();
        if tp + fp + fn_ > 0 {
            prop_assert!((f.micro.f1 - 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_mae_shift_is_exact(truth in proptest::collection::vec(20u32..200, 1..20), shift in 0u32..10) {
        let t: Vec<Vec<u32>> = truth.iter().map(|f| vec![*f]).collect();
        let p: Vec<Vec<u32>> = truth.iter().map(|f| vec![f + shift, f + 100]).collect();
        let e = frame_mae(&p, &t, "ED").unwrap().unwrap();
        prop_assert_eq!(e.mae_frames, shift as f64);
        prop_assert_eq!(e.count, truth.len());
    }

    #[test]
    fn benchmark_respects_mix(seed in any::<u64>(), easy in 0usize..6, medium in 0usize..6, difficult in 0usize..6) {
        let cfg = SimConfig { studies: 20, ..SimConfig::default() };
        let data: Vec<_> = (0..cfg.studies as u64).map(|i| generate_study(&cfg, i).unwrap()).collect();
        let mix = DifficultyMix { easy, medium, difficult };
        let set = generate_benchmark(&data, &Template::ALL, mix, seed);
        prop_assert!(set.cases.len() <= Template::ALL.len() * (easy + medium + difficult));
        let ids: std::collections::BTreeSet<_> = set.cases.iter().map(|c| &c.case_id).collect();
        prop_assert_eq!(ids.len(), set.cases.len());
        prop_assert!(set.cases.iter().all(|c| data.iter().any(|(s, _)| s.study_id == c.study_id)));
    }
}
