use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;

use dpn::data::*;
use dpn::embeddings::{fnv1a64, hash_id, FieldSchema, FieldSpec};
use dpn::experiments::load_movielens;
use dpn::metrics::{auc, auc_pairwise, slice_by_frequency};
use dpn::DpnError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi2_p(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn hash_matches_golden_file() {
    let text = include_str!("data/hash_golden.txt");
    let mut n = 0;
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let mut cols = line.split('\t');
        let (key, hex, bucket) = (cols.next().unwrap(), cols.next().unwrap(), cols.next().unwrap());
        assert_eq!(format!("{:016x}", fnv1a64(key.as_bytes())), hex, "key {key:?}");
        assert_eq!(hash_id(key, 1_000_003), bucket.parse::<usize>().unwrap(), "key {key:?}");
        n += 1;
    }
    assert_eq!(n, 100);
}

#[test]
fn hash_buckets_are_uniform() {
    let buckets = 64;
    let mut counts = vec![0; buckets];
    for i in 0..64_000 {
        counts[hash_id(&format!("user_{i}"), buckets)] += 1;
    }
    let p = chi2_p(&counts);
    assert!(p > 0.001, "p = {p}");
}

#[test]
fn csv_and_gzip_ingest_agree() {
    let dir = tempfile::tempdir().unwrap();
    let body = "label,user,item\n1,u1,a\n0,u2,b\n1,u1,b\n0,u3,a\n";
    let plain = dir.path().join("d.csv");
    fs::write(&plain, body).unwrap();
    let gz = dir.path().join("d.csv.gz");
    let mut enc = flate2::write::GzEncoder::new(fs::File::create(&gz).unwrap(), flate2::Compression::default());
    enc.write_all(body.as_bytes()).unwrap();
    enc.finish().unwrap();
    let a = ingest_csv(&plain, None, &IngestOptions::default(), 1).unwrap();
    let b = ingest_csv(&gz, None, &IngestOptions::default(), 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.schema.names(), vec!["user", "item"]);
    assert_eq!(a.ids, vec![0, 0, 1, 1, 0, 1, 2, 0]);
    assert_eq!(a.labels, vec![1.0, 0.0, 1.0, 0.0]);
    assert_eq!(a.schema.fields[0].vocab_size, 3);
}

#[test]
fn ingest_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, "label,user\n1,0\n1,1\n7,2\n").unwrap();
    match ingest_csv(&p, None, &IngestOptions::default(), 0) {
        Err(DpnError::Parse { line, msg, .. }) => {
            assert_eq!(line, 4);
            assert!(msg.contains("not binary"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    let schema = FieldSchema::new(vec![FieldSpec::new("user", 2)]).unwrap();
    fs::write(&p, "label,user\n1,0\n1,5\n").unwrap();
    match ingest_csv(&p, Some(&schema), &IngestOptions::default(), 0) {
        Err(DpnError::Parse { line, msg, .. }) => {
            assert_eq!(line, 3);
            assert!(msg.contains("out of range"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    fs::write(&p, "label,user\n1,0\n1,0,9\n").unwrap();
    assert!(matches!(ingest_csv(&p, None, &IngestOptions::default(), 0), Err(DpnError::Parse { line: 3, .. })));
}

#[test]
fn hashed_and_numeric_fields() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    fs::write(&p, "label,site,count\n1,example.com,100\n0,other.org,\n").unwrap();
    let mut count = FieldSpec::hashed("count", 97);
    count.numeric = true;
    let schema = FieldSchema::new(vec![FieldSpec::hashed("site", 97), count]).unwrap();
    let d = ingest_csv(&p, Some(&schema), &IngestOptions::default(), 0).unwrap();
    assert_eq!(d.row(0), &[hash_id("example.com", 97), hash_id(&log2_bucket(100.0).to_string(), 97)]);
    assert_eq!(d.row(1)[1], hash_id("", 97));
    assert_eq!(log2_bucket(100.0), (100f64.ln().powi(2)).floor() as i64);
    assert_eq!(log2_bucket(1.5), 1);
    assert_eq!(log2_bucket(-3.0), -3);
}

#[test]
fn libfm_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.libfm");
    fs::write(&p, "1 10:1 500:1 900:1\n-1 11:1 500:1 901:1\n\n+1 10:1 501:1 901:1\n").unwrap();
    let d = ingest_libfm(&p, &["user", "movie", "tag"], SplitRatios::default(), 0).unwrap();
    assert_eq!(d.labels, vec![1.0, 0.0, 1.0]);
    assert_eq!(d.ids, vec![0, 0, 0, 1, 0, 1, 0, 1, 1]);
    assert_eq!(d.schema.fields.iter().map(|f| f.vocab_size).collect::<Vec<_>>(), vec![2, 2, 2]);
    fs::write(&p, "1 10:1 500:1 900:1\n1 10:1 500:1\n").unwrap();
    assert!(matches!(
        ingest_libfm(&p, &["user", "movie", "tag"], SplitRatios::default(), 0),
        Err(DpnError::Parse { line: 2, .. })
    ));
}

fn positives(users: usize, per_user: usize, tags: usize) -> TabularDataset {
    let schema = FieldSchema::new(vec![FieldSpec::new("user", users), FieldSpec::new("tag", tags)]).unwrap();
    let mut ids = Vec::new();
    for u in 0..users {
        for k in 0..per_user {
            ids.extend([u, (u * 7 + k * 3) % tags]);
        }
    }
    let n = users * per_user;
    let splits = split_rows(n, SplitRatios::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    TabularDataset::new(schema, ids, vec![1.0; n], splits).unwrap()
}

#[test]
fn negatives_avoid_known_positives_and_keep_splits() {
    let pos = positives(30, 5, 20);
    let known: HashSet<(usize, usize)> = (0..pos.len()).map(|i| (pos.row(i)[0], pos.row(i)[1])).collect();
    let d = negative_sample(&pos, "user", "tag", 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(d.len(), pos.len() * 4);
    let mut i = 0;
    for p in 0..pos.len() {
        assert_eq!(d.labels[i], 1.0);
        for k in 1..=3 {
            let r = d.row(i + k);
            assert_eq!(d.labels[i + k], 0.0);
            assert_eq!(r[0], pos.row(p)[0]);
            assert!(!known.contains(&(r[0], r[1])), "sampled a positive");
            assert_eq!(d.splits[i + k], pos.splits[p]);
        }
        i += 4;
    }
}

#[test]
fn negatives_are_uniform_over_allowed_values() {
    // one user with a single positive tag; the other 9 should be equally likely
    let schema = FieldSchema::new(vec![FieldSpec::new("user", 1), FieldSpec::new("tag", 10)]).unwrap();
    let pos = TabularDataset::new(schema, vec![0, 4], vec![1.0], vec![Split::Train]).unwrap();
    let d = negative_sample(&pos, "user", "tag", 9_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for i in 1..d.len() {
        *counts.entry(d.row(i)[1]).or_default() += 1;
    }
    assert!(!counts.contains_key(&4));
    let c: Vec<usize> = (0..10).filter(|&t| t != 4).map(|t| counts[&t]).collect();
    let p = chi2_p(&c);
    assert!(p > 0.001, "p = {p}, counts {c:?}");
}

#[test]
fn saturated_user_is_an_error() {
    let schema = FieldSchema::new(vec![FieldSpec::new("user", 1), FieldSpec::new("tag", 2)]).unwrap();
    let pos = TabularDataset::new(schema, vec![0, 0, 0, 1], vec![1.0, 1.0], vec![Split::Train; 2]).unwrap();
    assert!(negative_sample(&pos, "user", "tag", 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn split_manifest_round_trip() {
    let splits = split_rows(1000, SplitRatios([8, 1, 1]), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let count = |s| splits.iter().filter(|&&x| x == s).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (800, 100, 100));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("splits.tsv");
    write_split_manifest(&p, &splits).unwrap();
    assert_eq!(read_split_manifest(&p).unwrap(), splits);
    fs::write(&p, "0\ttrain\n2\ttest\n").unwrap();
    assert!(matches!(read_split_manifest(&p), Err(DpnError::Parse { line: 2, .. })));
}

#[test]
fn auc_agrees_with_pair_counting() {
    let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.9, 0.2];
    let labels = [0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0];
    // positives 0.35, 0.8, 0.4, 0.2 vs negatives 0.1, 0.4, 0.9: 5.5 of 12 pairs
    assert!((auc(&scores, &labels).unwrap() - 5.5 / 12.0).abs() < 1e-15);
    assert_eq!(auc(&scores, &labels).unwrap(), auc_pairwise(&scores, &labels).unwrap());
}

#[test]
fn frequency_slices() {
    let schema = FieldSchema::new(vec![FieldSpec::new("user", 3)]).unwrap();
    let ids = vec![0, 0, 0, 1, 0, 1, 2];
    let splits = vec![Split::Train, Split::Train, Split::Train, Split::Train, Split::Test, Split::Test, Split::Test];
    let d = TabularDataset::new(schema, ids, vec![1.0; 7], splits).unwrap();
    assert_eq!(slice_by_frequency(&d, "user", 2.0).unwrap(), vec![5, 6]);
    assert_eq!(slice_by_frequency(&d, "user", 1.0).unwrap(), vec![6]);
    assert_eq!(slice_by_frequency(&d, "user", f64::INFINITY).unwrap(), vec![4, 5, 6]);
}

#[test]
fn movielens_loader_samples_negatives_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = String::from("user,movie,tag\n");
    for u in 0..20 {
        for k in 0..3 {
            body.push_str(&format!("u{u},m{},t{}\n", (u + k) % 7, (u * 3 + k) % 11));
        }
    }
    fs::write(dir.path().join("movielens_tag.csv"), body).unwrap();
    let d = load_movielens(dir.path(), 0).unwrap();
    assert_eq!(d.len(), 120);
    assert_eq!(d.labels.iter().filter(|&&y| y == 1.0).count(), 60);
    assert!(load_movielens(&dir.path().join("missing"), 0).is_err());
}
