use std::fs;

use posdebias::corpus::{corpus_stats, load_corpus, load_corpus_with, write_corpus, Corpus, Document, LoadOptions, Sample, Task};
use posdebias::Error;

fn labeled(task: Task, counts: &[(&str, usize)]) -> Corpus {
    let mut samples = Vec::new();
    for (label, n) in counts {
        for i in 0..*n {
            let mut s = match task {
                Task::Nli => Sample::nli(
                    format!("{label}-{i}"),
                    "what is the capital of france",
                    "paris is the capital",
                    if i % 2 == 0 { "entailment" } else { "not_entailment" },
                ),
                _ => Sample::grounded(
                    format!("{label}-{i}"),
                    task,
                    Document::from_texts(["the first line", "the second line"]),
                    vec![("q1".into(), Some("the first line".into())), ("q2".into(), None)],
                    "the second line",
                ),
            };
            s.split = Some(label.to_string());
            samples.push(s);
        }
    }
    Corpus::new(task, samples).unwrap()
}

#[test]
fn dataset_statistics_fixture_for_conversational_qa() {
    let counts = [("train", 500), ("dev", 250), ("test_biased", 3460), ("test_nonbiased", 2440)];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("canard.jsonl");
    write_corpus(&path, &labeled(Task::Cqa, &counts)).unwrap();
    let stats = corpus_stats(&load_corpus(&path, Task::Cqa).unwrap());
    assert_eq!(stats.total, 6650);
    for (label, n) in counts {
        assert_eq!(stats.by_label[label], n, "{label}");
    }
}

#[test]
fn dataset_statistics_fixture_for_two_class_nli() {
    let counts = [("train", 500), ("dev", 250), ("test_biased", 2000), ("test_nonbiased", 5000)];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("qnli.jsonl");
    write_corpus(&path, &labeled(Task::Nli, &counts)).unwrap();
    assert!(load_corpus(&path, Task::Nli).is_err(), "default class set rejects not_entailment");
    let opts = LoadOptions {
        nli_classes: vec!["entailment".into(), "not_entailment".into()],
    };
    let stats = corpus_stats(&load_corpus_with(&path, Task::Nli, &opts).unwrap());
    for (label, n) in counts {
        assert_eq!(stats.by_label[label], n, "{label}");
    }
    assert_eq!(stats.by_label.values().sum::<usize>(), stats.total);
}

fn write(lines: &[&[u8]]) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    fs::write(&path, lines.join(&b'\n')).unwrap();
    (dir, path)
}

const GOOD: &[u8] = br#"{"id":"a","task":"cqa","document":["x y","z w"],"history":[{"question":"q","answer":"x y"},{"question":"r"}],"target":"z w"}"#;

#[test]
fn load_errors_carry_line_numbers() {
    let bad_utf8: &[u8] = b"{\"id\":\"b\",\"task\":\"cqa\",\"document\":[\"\xff\"],\"target\":\"t\"}";
    let (_d, p) = write(&[GOOD, b"", bad_utf8]);
    match load_corpus(&p, Task::Cqa) {
        Err(Error::Parse { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains("UTF-8"), "{message}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }

    let (_d, p) = write(&[GOOD, GOOD]);
    assert!(matches!(load_corpus(&p, Task::Cqa), Err(Error::Parse { line: 2, .. })));

    let (_d, p) = write(&[GOOD]);
    assert!(matches!(load_corpus(&p, Task::Sum), Err(Error::Parse { line: 1, .. })));

    let no_doc: &[u8] = br#"{"id":"c","task":"cqa","target":"t"}"#;
    let (_d, p) = write(&[no_doc]);
    assert!(matches!(load_corpus(&p, Task::Cqa), Err(Error::Parse { line: 1, .. })));

    let (_d, p) = write(&[b"", b"  "]);
    assert!(matches!(load_corpus(&p, Task::Cqa), Err(Error::EmptyCorpus(_))));
}

#[test]
fn blank_lines_are_skipped_and_order_kept() {
    let second: &[u8] = br#"{"id":"b","task":"cqa","document":["x y"],"history":[{"question":"q","answer":"x y"}],"target":"x y"}"#;
    let (_d, p) = write(&[second, b"", GOOD, b""]);
    let c = load_corpus(&p, Task::Cqa).unwrap();
    let ids: Vec<&str> = c.samples().iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["b", "a"]);
}
