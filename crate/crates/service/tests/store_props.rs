use chrono::{TimeZone, Utc};
use hiersample_service::store::{check_grade, AnnotationRecord, Event, ExportFilter, Lane, Mode, Reply, Scope, Session, Status, Store};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Create { side: bool },
    Say { session: usize, text: String },
    Close { session: usize },
    Grade { session: usize, annotator: u8, grades: [u8; 3] },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        any::<bool>().prop_map(|side| Op::Create { side }),
        (0..6usize, "[a-z]{1,8}( [a-z]{1,8}){0,3}").prop_map(|(session, text)| Op::Say { session, text }),
        (0..6usize).prop_map(|session| Op::Close { session }),
        (0..6usize, 0..3u8, prop::array::uniform3(0..4u8)).prop_map(|(session, annotator, grades)| Op::Grade {
            session,
            annotator,
            grades
        }),
    ]
}

fn session(id: String, side: bool) -> Session {
    let lanes = (0..if side { 2 } else { 1 })
        .map(|k| Lane { label: ["A", "B"][k].into(), model_id: format!("m{k}"), turns: Vec::new() })
        .collect();
    Session {
        id,
        mode: if side { Mode::SideBySide } else { Mode::Single },
        lanes,
        status: Status::Open,
        created_at: Utc.timestamp_opt(1_700_000_000, 0).unwrap(),
        seed: 1,
        rerank: false,
        turn_limit: 3,
        human_turns: 0,
        lane_order: if side { vec![1, 0] } else { vec![0] },
        last_turn_id: None,
    }
}

/// Applies `ops`, skipping those the store rejects; returns how many were accepted.
fn run(store: &mut Store, ops: &[Op]) -> usize {
    let mut ids: Vec<String> = Vec::new();
    let mut accepted = 0;
    for op in ops {
        let ev = match op {
            Op::Create { side } => {
                let id = store.next_session_id();
                ids.push(id.clone());
                Event::Created { session: session(id, *side) }
            }
            Op::Say { session, text } => {
                let Some(id) = ids.get(*session) else { continue };
                let lanes = store.session(id).unwrap().lanes.len();
                let replies = (0..lanes).map(|k| Reply { text: format!("{text} {k}"), truncated: k == 1 }).collect();
                Event::Exchange { session_id: id.clone(), human: text.clone(), replies, turn_id: None }
            }
            Op::Close { session } => {
                let Some(id) = ids.get(*session) else { continue };
                Event::Closed { session_id: id.clone() }
            }
            Op::Grade { session, annotator, grades } => {
                let Some(id) = ids.get(*session) else { continue };
                let mut record = AnnotationRecord {
                    id: store.next_annotation_id(),
                    session_id: id.clone(),
                    scope: Scope::Dialogue,
                    lane: Some("A".into()),
                    fluency: grades[0],
                    non_repetition: grades[1],
                    coherence: grades[2],
                    annotator: format!("ann{annotator}"),
                    timestamp: Utc.timestamp_opt(1_700_000_100, 0).unwrap(),
                    version: 0,
                };
                record.version = store.next_version(&record);
                Event::Annotated { record }
            }
        };
        if store.commit(ev).is_ok() {
            accepted += 1;
        }
    }
    accepted
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reopened_log_equals_live_store(ops in prop::collection::vec(op(), 0..40)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut live = Store::open(&path).unwrap();
        run(&mut live, &ops);
        let replayed = Store::open(&path).unwrap();
        prop_assert!(replayed == live);
        let all = ExportFilter { reveal: true, ..Default::default() };
        prop_assert_eq!(Store::import_jsonl(&live.export_jsonl(&all)).unwrap().export_jsonl(&all), live.export_jsonl(&all));
    }

    #[test]
    fn stored_state_respects_limits(ops in prop::collection::vec(op(), 0..60)) {
        let mut store = Store::in_memory();
        run(&mut store, &ops);
        for s in store.sessions() {
            prop_assert!(s.human_turns <= s.turn_limit);
            prop_assert!(s.human_turns < s.turn_limit || s.status == Status::Complete);
            for lane in &s.lanes {
                prop_assert_eq!(lane.turns.len(), 2 * s.human_turns);
            }
        }
        for a in store.annotation_history() {
            prop_assert!(a.fluency <= 2 && a.non_repetition <= 2 && a.coherence <= 2);
        }
        let latest = store.annotations();
        let mut keys: Vec<_> = latest.iter().map(|a| (&a.session_id, &a.annotator)).collect();
        keys.sort();
        keys.dedup();
        prop_assert_eq!(keys.len(), latest.len());
    }

    #[test]
    fn only_three_grades_are_valid(g in any::<u8>()) {
        prop_assert_eq!(check_grade("g", g).is_ok(), g <= 2);
    }
}
