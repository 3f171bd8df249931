mod common;

use nogap::corpus;

#[test]
fn corpus_passes_at_seed_zero() {
    let results = corpus::run_corpus(&common::corpus_dir()).unwrap();
    let table = corpus::table(&results);
    println!("{table}");
    assert!(results.len() >= 10, "corpus entries went missing:\n{table}");
    assert!(results.iter().all(|r| r.passed()), "{table}");
}

#[test]
fn corpus_is_deterministic() {
    let dir = common::corpus_dir().join("dyadic-staircase");
    let spec = corpus::load_entry(&dir).unwrap();
    let (a, _) = corpus::run_entry(&dir, &spec).unwrap();
    let (b, _) = corpus::run_entry(&dir, &spec).unwrap();
    assert_eq!(a, b);
}
