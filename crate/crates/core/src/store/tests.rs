use std::sync::Arc;

use chrono::{Duration, TimeZone, Utc};
use proptest::prelude::*;

use super::*;
use crate::domain::{ManualClock, Seed};

fn record(stage: &str, secs: i64) -> ProvenanceRecord {
    let t = Utc.timestamp_opt(1_700_000_000 + secs, 0).unwrap();
    ProvenanceRecord::begin(
        stage,
        "test-plugin",
        "1.0",
        vec![("alpha".into(), "1".into())],
        Seed(9),
        "tester",
        t,
    )
    .finished(t + Duration::seconds(1))
}

fn store() -> (tempfile::TempDir, ArtifactStore) {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::at_epoch());
    let s = ArtifactStore::open_with_clock(dir.path(), clock).unwrap();
    (dir, s)
}

#[test]
fn put_is_idempotent() {
    let (dir, s) = store();
    let a = s.put(b"hello", ArtifactKind::Package, &[], record("crawl", 0)).unwrap();
    let b = s.put(b"hello", ArtifactKind::Package, &[], record("crawl", 5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(s.list(None, 0, 10).unwrap().total, 1);
    let shard = dir.path().join("objects").join(a.shard());
    assert_eq!(std::fs::read_dir(shard).unwrap().count(), 1);
    // the first record stays
    assert_eq!(s.lineage(&a).unwrap()[0].started_at.timestamp(), 1_700_000_000);
}

#[test]
fn lineage_extends_input_lineage() {
    let (_d, s) = store();
    let r0 = record("crawl", 0);
    let a = s.put(b"a", ArtifactKind::Package, &[], r0.clone()).unwrap();
    let r1 = record("select", 1);
    let b = s.put(b"b", ArtifactKind::DatasetSelected, &[a.clone()], r1.clone()).unwrap();
    let lineage = s.lineage(&b).unwrap();
    assert_eq!(lineage.len(), 2);
    assert_eq!(lineage[0].run_id, r0.run_id);
    assert_eq!(lineage[1].run_id, r1.run_id);
    assert_eq!(lineage[1].input_ids, vec![a.clone()]);
    assert_eq!(lineage[1].output_ids, vec![b]);
}

#[test]
fn shared_ancestor_appears_once() {
    let (_d, s) = store();
    let r0 = record("crawl", 0);
    let root = s.put(b"root", ArtifactKind::Package, &[], r0.clone()).unwrap();
    let a = s.put(b"a", ArtifactKind::Session, &[root.clone()], record("analyze", 1)).unwrap();
    let b = s.put(b"b", ArtifactKind::Session, &[root.clone()], record("analyze", 2)).unwrap();
    let c = s
        .put(b"c", ArtifactKind::DatasetSelected, &[a, b], record("select", 3))
        .unwrap();
    let lineage = s.lineage(&c).unwrap();
    assert_eq!(lineage.len(), 4);
    assert_eq!(lineage.iter().filter(|r| r.run_id == r0.run_id).count(), 1);
    assert_eq!(lineage[0].run_id, r0.run_id);
    assert_eq!(lineage[3].stage, "select");
}

#[test]
fn unknown_input_is_rejected() {
    let (_d, s) = store();
    let ghost = content_id(b"ghost");
    let err = s
        .put(b"x", ArtifactKind::Model, &[ghost], record("train", 0))
        .unwrap_err();
    assert!(matches!(err, Error::MissingInput(_)));
    assert_eq!(s.list(None, 0, 10).unwrap().total, 0);
}

#[test]
fn get_round_trip_and_missing() {
    let (_d, s) = store();
    let id = s.put(b"payload", ArtifactKind::Package, &[], record("crawl", 0)).unwrap();
    assert_eq!(s.get(&id).unwrap(), b"payload");
    assert!(matches!(s.get(&content_id(b"nope")), Err(Error::NotFound(_))));
}

#[test]
fn tampered_object_fails_integrity() {
    let (dir, s) = store();
    let payload = b"some payload that will be tampered with on disk".repeat(4);
    let id = s.put(&payload, ArtifactKind::Package, &[], record("crawl", 0)).unwrap();
    let path = dir
        .path()
        .join("objects")
        .join(id.shard())
        .join(format!("{id}.zd"));
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(s.get(&id), Err(Error::Integrity(_))));
    assert!(!s.fsck().is_clean());
}

#[test]
fn list_pages_in_creation_order() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::at_epoch());
    let s = ArtifactStore::open_with_clock(dir.path(), clock.clone()).unwrap();
    assert_eq!(s.list(None, 0, 5).unwrap().total, 0);
    let mut ids = Vec::new();
    for i in 0..3u8 {
        ids.push(s.put(&[i], ArtifactKind::Package, &[], record("crawl", i as i64)).unwrap());
        clock.advance(Duration::seconds(1));
    }
    let page = s.list(None, 0, 2).unwrap();
    assert_eq!(page.total, 3);
    assert_eq!(page.items.iter().map(|i| i.id.clone()).collect::<Vec<_>>(), ids[..2]);
    let rest = s.list(None, 2, 2).unwrap();
    assert_eq!(rest.items.len(), 1);
    assert_eq!(rest.items[0].id, ids[2]);
    assert!(s.list(Some(ArtifactKind::Model), 0, 10).unwrap().items.is_empty());
    assert!(s.list(None, 0, 0).is_err());
}

#[test]
fn reopen_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let (id, listing, xml) = {
        let s = ArtifactStore::open(dir.path()).unwrap();
        let a = s.put(b"a", ArtifactKind::Package, &[], record("crawl", 0)).unwrap();
        let b = s.put(b"b", ArtifactKind::Session, &[a], record("analyze", 1)).unwrap();
        s.set_ref("session/x", serde_json::json!(b.to_string())).unwrap();
        (b.clone(), s.list(None, 0, 10).unwrap(), s.export_provenance_xml(&b).unwrap())
    };
    let s = ArtifactStore::open(dir.path()).unwrap();
    assert_eq!(s.list(None, 0, 10).unwrap(), listing);
    assert_eq!(s.export_provenance_xml(&id).unwrap(), xml);
    assert_eq!(s.get_ref_id("session/x"), Some(id));
}

#[test]
fn torn_log_tail_and_temp_files_are_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let s = ArtifactStore::open(dir.path()).unwrap();
        s.put(b"a", ArtifactKind::Package, &[], record("crawl", 0)).unwrap()
    };
    let log = dir.path().join("provenance.log");
    let mut f = OpenOptions::new().append(true).open(&log).unwrap();
    f.write_all(b"{\"id\":\"trunc").unwrap();
    let tmp = dir.path().join("objects").join(id.shard()).join(".junk.tmp");
    std::fs::write(&tmp, b"partial").unwrap();

    let s = ArtifactStore::open(dir.path()).unwrap();
    assert!(!tmp.exists());
    assert_eq!(s.get(&id).unwrap(), b"a");
    let b = s.put(b"b", ArtifactKind::Package, &[], record("crawl", 1)).unwrap();
    drop(s);
    let s = ArtifactStore::open(dir.path()).unwrap();
    assert_eq!(s.list(None, 0, 10).unwrap().total, 2);
    assert!(s.contains(&b));
}

#[test]
fn export_empty_lineage_is_self_closing() {
    let xml = render_provenance_xml(&content_id(b"x"), &[]);
    assert_eq!(xml, format!("<provenance artifact=\"{}\"/>\n", content_id(b"x")));
    assert!(import_provenance_xml(&xml).unwrap().is_empty());
}

#[test]
fn export_orders_records_oldest_first() {
    let (_d, s) = store();
    let a = s.put(b"a", ArtifactKind::Package, &[], record("crawl", 0)).unwrap();
    let b = s.put(b"b", ArtifactKind::Session, &[a.clone()], record("analyze", 1)).unwrap();
    let xml = s.export_provenance_xml(&b).unwrap();
    assert!(xml.starts_with("<provenance"));
    assert_eq!(xml.matches("<record ").count(), 2);
    let crawl = xml.find("stage=\"crawl\"").unwrap();
    let analyze = xml.find("stage=\"analyze\"").unwrap();
    assert!(crawl < analyze);
    assert_eq!(import_provenance_xml(&xml).unwrap(), s.lineage(&b).unwrap());
}

#[test]
fn missing_seed_names_attribute() {
    let id = content_id(b"x");
    let doc = format!(
        "<provenance artifact=\"{id}\"><record run=\"r\" stage=\"s\" plugin=\"p\" version=\"1\" user=\"u\" started=\"2024-01-01T00:00:00Z\" finished=\"2024-01-01T00:00:00Z\"/></provenance>"
    );
    match import_provenance_xml(&doc) {
        Err(Error::Parse(what)) => assert_eq!(what, "record/@seed"),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn malformed_documents_are_rejected() {
    assert!(import_provenance_xml("<provenance").is_err());
    assert!(import_provenance_xml("<other/>").is_err());
    let id = content_id(b"x");
    assert!(import_provenance_xml(&format!("<provenance artifact=\"{id}\"><bogus/></provenance>")).is_err());
    assert!(import_provenance_xml(&format!("<provenance artifact=\"{id}\">")).is_err());
}

#[test]
fn fsck_clean_store() {
    let (_d, s) = store();
    let a = s.put(b"a", ArtifactKind::Package, &[], record("crawl", 0)).unwrap();
    s.put(b"b", ArtifactKind::Session, &[a], record("analyze", 1)).unwrap();
    let report = s.fsck();
    assert_eq!(report.checked, 2);
    assert!(report.is_clean(), "{:?}", report.problems);
}

#[test]
fn claim_name_conflicts_only_on_different_ids() {
    let (_d, s) = store();
    let a = content_id(b"a");
    let b = content_id(b"b");
    s.claim_name("model/m", &a).unwrap();
    s.claim_name("model/m", &a).unwrap();
    assert!(matches!(s.claim_name("model/m", &b), Err(Error::Conflict(_))));
    assert_eq!(s.refs_with_prefix("model/").len(), 1);
}

#[test]
fn compressible_payload_shrinks() {
    let (_d, s) = store();
    let payload = b"0 1 0 0 1 1 0\n".repeat(500);
    let id = s.put(&payload, ArtifactKind::DatasetMerged, &[], record("merge", 0)).unwrap();
    assert!(s.stored_size(&id).unwrap() < payload.len() as u64 / 4);
}

fn arb_text() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[ -~äöü\n\t&<>\"']{0,12}").unwrap()
}

fn arb_record() -> impl Strategy<Value = ProvenanceRecord> {
    (
        arb_text(),
        arb_text(),
        proptest::collection::vec((arb_text(), arb_text()), 0..4),
        any::<u64>(),
        0i64..2_000_000_000,
        0i64..1_000_000_000,
        proptest::collection::vec(any::<[u8; 4]>(), 0..3),
        proptest::collection::vec(any::<[u8; 4]>(), 0..3),
    )
        .prop_map(|(stage, user, params, seed, start, nanos, ins, outs)| {
            let started = Utc.timestamp_opt(start, nanos as u32).unwrap();
            ProvenanceRecord {
                run_id: uuid::Uuid::from_u64_pair(seed, start as u64).to_string(),
                stage,
                plugin_id: "plugin".into(),
                plugin_version: "0.1".into(),
                params,
                seed: Seed(seed),
                user,
                started_at: started,
                finished_at: started + Duration::milliseconds(start % 5000),
                input_ids: ins.iter().map(|b| content_id(b)).collect(),
                output_ids: outs.iter().map(|b| content_id(b)).collect(),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn xml_round_trip_is_byte_identical(records in proptest::collection::vec(arb_record(), 0..5)) {
        let artifact = content_id(b"artifact");
        let xml = render_provenance_xml(&artifact, &records);
        let (parsed_id, parsed) = parse_provenance_xml(&xml).unwrap();
        prop_assert_eq!(&parsed_id, &artifact);
        prop_assert_eq!(&parsed, &records);
        prop_assert_eq!(render_provenance_xml(&parsed_id, &parsed), xml);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn get_inverts_put(payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..512), 1..6)) {
        let (_d, s) = store();
        for p in &payloads {
            let id = s.put(p, ArtifactKind::Package, &[], record("crawl", 0)).unwrap();
            prop_assert_eq!(&id, &content_id(p));
            prop_assert_eq!(s.get(&id).unwrap(), p.clone());
            prop_assert_eq!(s.put(p, ArtifactKind::Package, &[], record("crawl", 1)).unwrap(), id);
            // raw deflate stored blocks add 5 bytes per 64 KiB
            prop_assert!(s.stored_size(&content_id(p)).unwrap() <= p.len() as u64 + 16);
        }
    }
}
