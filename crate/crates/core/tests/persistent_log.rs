use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use kvflow_core::log::{decode, LogConfig, PersistentLog, RECORD_OVERHEAD};
use kvflow_core::model::now_us;
use kvflow_core::{Error, ObjectKey, Version};
use rand::{Rng, SeedableRng};

fn key(s: &str) -> ObjectKey {
    ObjectKey::compose("/logs", s).unwrap()
}

struct Writer {
    log: Arc<PersistentLog>,
    seq: u64,
    versions: std::collections::HashMap<String, u64>,
}

impl Writer {
    fn new(log: Arc<PersistentLog>) -> Self {
        let seq = log.last_appended_seq();
        Writer {
            log,
            seq,
            versions: Default::default(),
        }
    }

    fn put(&mut self, k: &str, payload: &[u8], ts: u64) -> kvflow_core::log::Ticket {
        self.seq += 1;
        let v = self
            .versions
            .entry(k.to_string())
            .and_modify(|v| *v += 1)
            .or_insert(0);
        let version = Version {
            per_key_version: *v,
            shard_seq: self.seq,
            timestamp_us: ts,
        };
        self.log
            .append(&key(k), Bytes::copy_from_slice(payload), version)
            .unwrap()
    }
}

/// Independent oracle: decode the raw file front to back.
fn scan_raw(path: &Path) -> Vec<(String, Version)> {
    let data = fs::read(path).unwrap();
    let mut at = 0;
    let mut out = Vec::new();
    while at < data.len() {
        let Ok((rec, len)) = decode(&data[at..]) else {
            break;
        };
        out.push((rec.key, rec.version));
        at += len;
    }
    out
}

fn oracle_time_to_version(raw: &[(String, Version)], k: &str, t: u64) -> Option<u64> {
    raw.iter()
        .filter(|(rk, v)| rk == k && v.timestamp_us <= t)
        .map(|(_, v)| v.per_key_version)
        .max()
}

#[test]
fn idle_single_append_syncs_once() {
    let dir = tempfile::tempdir().unwrap();
    let (log, _) = PersistentLog::open(LogConfig::new(dir.path().join("a.log"))).unwrap();
    let mut w = Writer::new(Arc::clone(&log));
    let t = w.put("k", b"x", 1);
    t.wait();
    assert_eq!(log.stats().sync_calls, 1);
    assert_eq!(log.stats().write_calls, 1);
}

#[test]
fn fast_appends_are_batched() {
    let dir = tempfile::tempdir().unwrap();
    let (log, _) = PersistentLog::open(LogConfig::new(dir.path().join("a.log"))).unwrap();
    let mut w = Writer::new(Arc::clone(&log));
    let tickets: Vec<_> = (0..100)
        .map(|i| w.put(&format!("k{}", i % 7), &[i as u8; 64], i))
        .collect();
    for t in &tickets {
        t.wait();
    }
    let stats = log.stats();
    assert_eq!(stats.appends, 100);
    assert!(stats.sync_calls <= 100);
    assert!(
        stats.sync_calls < 100,
        "expected batching, got {} syncs",
        stats.sync_calls
    );
    // one storage write per batch, each record written exactly once
    assert_eq!(stats.write_calls, stats.sync_calls);
    let expected: u64 = (0..100)
        .map(|i| (RECORD_OVERHEAD + format!("/logs/k{}", i % 7).len() + 64) as u64)
        .sum();
    assert_eq!(stats.bytes_written, expected);
}

#[test]
#[should_panic(expected = "out-of-order append")]
fn out_of_order_append_panics() {
    let dir = tempfile::tempdir().unwrap();
    let (log, _) = PersistentLog::open(LogConfig::new(dir.path().join("a.log"))).unwrap();
    log.append(
        &key("k"),
        Bytes::new(),
        Version {
            per_key_version: 0,
            shard_seq: 1,
            timestamp_us: 1,
        },
    )
    .unwrap();
    let _ = log.append(
        &key("j"),
        Bytes::new(),
        Version {
            per_key_version: 0,
            shard_seq: 3,
            timestamp_us: 2,
        },
    );
}

#[test]
fn time_to_version_examples() {
    let dir = tempfile::tempdir().unwrap();
    let (log, _) =
        PersistentLog::open(LogConfig::new(dir.path().join("a.log")).single_replica()).unwrap();
    let mut w = Writer::new(Arc::clone(&log));
    for ts in [100_000, 110_000, 120_000] {
        w.put("k", b"v", ts);
    }
    w.put("other", b"v", 130_000).wait();
    assert_eq!(
        log.time_to_version("/logs/k", 115_000)
            .unwrap()
            .timestamp_us,
        110_000
    );
    assert_eq!(
        log.time_to_version("/logs/k", 120_000)
            .unwrap()
            .per_key_version,
        2
    );
    assert!(matches!(
        log.time_to_version("/logs/k", 99_999),
        Err(Error::NotFound { .. })
    ));
    assert!(matches!(
        log.time_to_version("/logs/none", 1),
        Err(Error::KeyNotFound(_))
    ));
}

#[test]
fn time_to_version_matches_raw_scan() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.log");
    let (log, _) = PersistentLog::open(LogConfig::new(&path).single_replica()).unwrap();
    let mut w = Writer::new(Arc::clone(&log));
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let mut ts = 1_000u64;
    let mut last = None;
    for _ in 0..1000 {
        ts += rng.random_range(1..50);
        let k = format!("k{}", rng.random_range(0..10));
        last = Some(w.put(&k, b"p", ts));
    }
    last.unwrap().wait();
    let raw = scan_raw(&path);
    assert_eq!(raw.len(), 1000);
    for _ in 0..2000 {
        let k = format!("k{}", rng.random_range(0..10));
        // half the queries land exactly on a record timestamp
        let t = if rng.random_bool(0.5) {
            raw[rng.random_range(0..raw.len())].1.timestamp_us
        } else {
            rng.random_range(0..ts + 100)
        };
        let got = log
            .time_to_version(&format!("/logs/{k}"), t)
            .ok()
            .map(|v| v.per_key_version);
        assert_eq!(
            got,
            oracle_time_to_version(&raw, &format!("/logs/{k}"), t),
            "key {k} t {t}"
        );
    }
}

#[test]
fn get_by_time_in_stable_past_is_immediate() {
    let dir = tempfile::tempdir().unwrap();
    let (log, _) =
        PersistentLog::open(LogConfig::new(dir.path().join("a.log")).single_replica()).unwrap();
    let mut w = Writer::new(Arc::clone(&log));
    w.put("k", b"old", 10);
    w.put("k", b"new", 20).wait();
    let start = Instant::now();
    let rec = log.get_by_time("/logs/k", 15).unwrap();
    assert!(start.elapsed() < Duration::from_millis(50));
    assert_eq!(&rec.payload[..], b"old");
}

#[test]
fn get_by_time_in_future_waits_for_frontier() {
    let dir = tempfile::tempdir().unwrap();
    let (log, _) =
        PersistentLog::open(LogConfig::new(dir.path().join("a.log")).single_replica()).unwrap();
    let writer_log = Arc::clone(&log);
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let stop2 = Arc::clone(&stop);
    let h = thread::spawn(move || {
        let mut w = Writer::new(writer_log);
        let mut i = 0u32;
        while !stop2.load(std::sync::atomic::Ordering::Relaxed) {
            w.put("k", &i.to_le_bytes(), now_us());
            i += 1;
            thread::sleep(Duration::from_millis(10));
        }
    });
    thread::sleep(Duration::from_millis(30));
    let t = now_us() + 50_000;
    let start = Instant::now();
    let rec = log.get_by_time("/logs/k", t).unwrap();
    let waited = start.elapsed();
    stop.store(true, std::sync::atomic::Ordering::Relaxed);
    h.join().unwrap();
    assert!(waited >= Duration::from_millis(40), "waited {waited:?}");
    assert!(rec.version.timestamp_us <= t);
    // nothing later than the returned record is still at or before t
    let expected = log.time_to_version("/logs/k", t).unwrap();
    assert_eq!(rec.version, expected);
}

#[test]
fn get_by_time_times_out_without_progress() {
    let dir = tempfile::tempdir().unwrap();
    let (log, _) =
        PersistentLog::open(LogConfig::new(dir.path().join("a.log")).single_replica()).unwrap();
    let mut w = Writer::new(Arc::clone(&log));
    w.put("k", b"v", now_us()).wait();
    let r = log.get_by_time_within("/logs/k", now_us() + 1_000_000, Duration::from_millis(30));
    assert!(matches!(r, Err(Error::Timeout(_))));
}

#[test]
fn frontier_is_min_of_acks() {
    let dir = tempfile::tempdir().unwrap();
    let (log, _) = PersistentLog::open(LogConfig::new(dir.path().join("a.log"))).unwrap();
    let mut w = Writer::new(Arc::clone(&log));
    let mut last = None;
    for i in 1..=5 {
        last = Some(w.put("k", b"v", i * 100));
    }
    last.unwrap().wait();
    assert_eq!(
        log.advance_frontier(&[Some(5), None, Some(4)]).stable_seq,
        0
    );
    let f = log.advance_frontier(&[Some(5), Some(3), Some(4)]);
    assert_eq!((f.stable_seq, f.stable_ts), (3, 300));
    // never moves backwards
    assert_eq!(
        log.advance_frontier(&[Some(5), Some(1), Some(4)])
            .stable_seq,
        3
    );
    assert_eq!(log.advance_frontier(&[Some(5)]).stable_seq, 5);
}

#[test]
fn recovery_after_clean_shutdown() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.log");
    let before;
    {
        let (log, _) = PersistentLog::open(LogConfig::new(&path)).unwrap();
        let mut w = Writer::new(Arc::clone(&log));
        for i in 0..50u64 {
            w.put(&format!("k{}", i % 4), &i.to_le_bytes(), 1000 + i);
        }
        log.close();
        before = scan_raw(&path);
    }
    let (log, rec) = PersistentLog::open(LogConfig::new(&path)).unwrap();
    assert_eq!(rec.dropped_bytes, 0);
    assert_eq!(rec.records.len(), 50);
    assert_eq!(
        rec.records
            .iter()
            .map(|r| (r.key.clone(), r.version))
            .collect::<Vec<_>>(),
        before
    );
    assert_eq!(log.last_appended_seq(), 50);
    assert_eq!(log.indexed_records(), 50);
    let range = log.get_range_by_version("/logs/k1", 0, 12).unwrap();
    assert_eq!(range.len(), 13);
    assert!(range
        .windows(2)
        .all(|w| w[0].version.per_key_version + 1 == w[1].version.per_key_version));
    // appends continue the chain after recovery
    let mut w = Writer::new(Arc::clone(&log));
    w.versions.insert("k1".into(), 12);
    w.put("k1", b"more", 5000).wait();
    let walked = log.get_range_by_version("/logs/k1", 11, 13).unwrap();
    assert_eq!(&walked[2].payload[..], b"more");
    assert_eq!(walked[1].version.per_key_version, 12);
}

#[test]
fn recovery_drops_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.log");
    {
        let (log, _) = PersistentLog::open(LogConfig::new(&path)).unwrap();
        let mut w = Writer::new(Arc::clone(&log));
        for i in 0..10u64 {
            w.put("k", &[i as u8; 100], i + 1);
        }
        log.close();
    }
    let full = fs::metadata(&path).unwrap().len();
    let f = fs::OpenOptions::new().write(true).open(&path).unwrap();
    f.set_len(full - 30).unwrap();
    drop(f);
    let (log, rec) = PersistentLog::open(LogConfig::new(&path)).unwrap();
    assert_eq!(rec.records.len(), 9);
    assert!(rec.dropped_bytes > 0);
    assert_eq!(log.last_appended_seq(), 9);
    // file was cut back to the valid prefix, so new appends frame cleanly
    let mut w = Writer::new(Arc::clone(&log));
    w.versions.insert("k".into(), 8);
    w.put("k", b"after", 100).wait();
    log.close();
    assert_eq!(scan_raw(&path).len(), 10);
}

#[test]
fn recovery_of_empty_and_garbage_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.log");
    fs::write(&path, b"").unwrap();
    let (_, rec) = PersistentLog::open(LogConfig::new(&path)).unwrap();
    assert!(rec.records.is_empty());

    let bad = dir.path().join("bad.log");
    fs::write(&bad, [0xffu8; 64]).unwrap();
    assert!(matches!(
        PersistentLog::open(LogConfig::new(&bad)),
        Err(Error::CorruptLog(_))
    ));
}

#[test]
fn abandoned_log_loses_only_unsynced_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.log");
    let mut cfg = LogConfig::new(&path);
    cfg.flush_interval = Duration::from_secs(3600);
    cfg.flush_bytes = usize::MAX;
    let (log, _) = PersistentLog::open(cfg).unwrap();
    let mut w = Writer::new(Arc::clone(&log));
    let t = w.put("k", b"staged", 1);
    log.abandon();
    assert!(!t.is_durable());
    drop(w);
    drop(log);
    let (_, rec) = PersistentLog::open(LogConfig::new(&path)).unwrap();
    assert!(rec.records.is_empty());
}

#[test]
fn size_budget_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = LogConfig::new(dir.path().join("a.log"));
    cfg.size_budget = 200;
    let (log, _) = PersistentLog::open(cfg).unwrap();
    let v = |seq| Version {
        per_key_version: seq - 1,
        shard_seq: seq,
        timestamp_us: seq,
    };
    log.append(&key("k"), Bytes::from(vec![0u8; 100]), v(1))
        .unwrap();
    let r = log.append(&key("k"), Bytes::from(vec![0u8; 100]), v(2));
    assert!(matches!(r, Err(Error::LogFull { budget: 200 })));
}
