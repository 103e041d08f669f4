//! Crash tolerance of the partition files.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use irrigo_server::{Query, RecordKind, Store, StoreOptions, StoreRecord};
use proptest::prelude::*;
use serde_json::json;

const T0: i64 = 1_700_000_000_000;

fn rec(i: i64) -> StoreRecord {
    let ts = T0 + i * 2_000;
    StoreRecord::new(RecordKind::Telemetry, "n1", ts, ts + 5, json!({"ts": ts, "node": "n1", "soil_adc": 2000.0 + i as f64}))
}

fn fill(dir: &Path, n: i64) -> PathBuf {
    let mut s = Store::open(StoreOptions::new(dir)).unwrap();
    for i in 0..n {
        s.append(rec(i)).unwrap();
    }
    let nodes = fs::read_dir(dir.join("n1")).unwrap().map(|e| e.unwrap().path()).collect::<Vec<_>>();
    assert_eq!(nodes.len(), 1);
    nodes[0].clone()
}

#[test]
fn truncated_final_line_loses_one_record_and_reloads_clean() {
    let dir = tempfile::tempdir().unwrap();
    let file = fill(dir.path(), 500);
    let len = fs::metadata(&file).unwrap().len();
    // cut the last line roughly in half, as a crash mid-write would
    OpenOptions::new().write(true).open(&file).unwrap().set_len(len - 30).unwrap();

    let mut s = Store::open(StoreOptions::new(dir.path())).unwrap();
    assert_eq!(s.recovery().records, 499);
    assert_eq!(s.recovery().skipped_lines, 1);
    let got = s.query(&Query::new("n1")).unwrap();
    assert_eq!(got, (0..499).map(rec).collect::<Vec<_>>());

    // the next append starts on a line boundary
    s.append(rec(499)).unwrap();
    drop(s);
    let s = Store::open(StoreOptions::new(dir.path())).unwrap();
    assert_eq!(s.recovery().records, 500);
    assert_eq!(s.recovery().skipped_lines, 0);
    assert_eq!(s.query(&Query::new("n1")).unwrap().len(), 500);
}

#[test]
fn corrupt_inner_line_is_skipped_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let file = fill(dir.path(), 10);
    let text = fs::read_to_string(&file).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[4] = "{garbage";
    fs::write(&file, lines.join("\n") + "\n").unwrap();
    let s = Store::open(StoreOptions::new(dir.path())).unwrap();
    assert_eq!(s.recovery().records, 9);
    assert_eq!(s.recovery().skipped_lines, 1);
    assert_eq!(s.query(&Query::new("n1")).unwrap().len(), 9);
}

#[test]
fn appends_after_reopen_land_in_the_same_partition() {
    let dir = tempfile::tempdir().unwrap();
    let file = fill(dir.path(), 3);
    let mut s = Store::open(StoreOptions::new(dir.path())).unwrap();
    s.append(rec(3)).unwrap();
    assert_eq!(fs::read_to_string(&file).unwrap().lines().count(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    /// Cutting the file at any byte keeps every line that was complete.
    #[test]
    fn any_cut_keeps_all_complete_lines(n in 1i64..60, cut_frac in 0.0f64..1.0) {
        let dir = tempfile::tempdir().unwrap();
        let file = fill(dir.path(), n);
        let data = fs::read(&file).unwrap();
        let cut = (data.len() as f64 * cut_frac) as usize;
        let complete = data[..cut].iter().filter(|&&b| b == b'\n').count();
        OpenOptions::new().write(true).open(&file).unwrap().set_len(cut as u64).unwrap();
        let s = Store::open(StoreOptions::new(dir.path())).unwrap();
        prop_assert_eq!(s.recovery().records, complete);
        prop_assert!(s.recovery().skipped_lines <= 1);
        let got = s.query(&Query::new("n1")).unwrap();
        prop_assert_eq!(got, (0..complete as i64).map(rec).collect::<Vec<_>>());
    }
}

#[test]
fn dead_letters_counted_across_reopen() {
    let dir = tempfile::tempdir().unwrap();
    {
        let mut s = Store::open(StoreOptions::new(dir.path())).unwrap();
        s.dead_letter("farm/n1/telemetry", b"{oops", "malformed", T0).unwrap();
    }
    let s = Store::open(StoreOptions::new(dir.path())).unwrap();
    assert_eq!(s.dead_letter_count(), 1);
    assert!(fs::read_to_string(s.dead_letter_path()).unwrap().contains("{oops"));
}
