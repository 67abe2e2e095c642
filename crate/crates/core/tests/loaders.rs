use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fairmeta::data::{self, load_movielens, DataError, Schema};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn ml100k_dir(ratings: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut users = String::new();
    for u in 1..=10 {
        let gender = if u % 2 == 0 { "M" } else { "F" };
        writeln!(users, "{u}|{}|{gender}|student|{:05}", 18 + u, u * 1111).unwrap();
    }
    let mut items = String::new();
    for i in 1..=100 {
        let flags: Vec<&str> = (0..19).map(|g| if g == i % 19 { "1" } else { "0" }).collect();
        writeln!(items, "{i}|Film {i} (1995)|01-Jan-1995||http://x|{}", flags.join("|")).unwrap();
    }
    fs::write(dir.path().join("u.user"), users).unwrap();
    fs::write(dir.path().join("u.item"), items).unwrap();
    fs::write(dir.path().join("u.data"), ratings).unwrap();
    dir
}

#[test]
fn one_malformed_row_in_a_thousand_is_rejected_alone() {
    let mut ratings = String::new();
    for n in 0..1000 {
        let (u, i) = (n % 10 + 1, n / 10 + 1);
        if n == 500 {
            writeln!(ratings, "{u}\t{i}\tfive\t880000000").unwrap();
        } else {
            writeln!(ratings, "{u}\t{i}\t{}\t{}", n % 5 + 1, 880_000_000 + n).unwrap();
        }
    }
    let dir = ml100k_dir(&ratings);
    let raw = load_movielens(dir.path(), Schema::Ml100k).unwrap();
    assert_eq!(raw.interactions.len(), 999);
    assert_eq!(raw.rejects.len(), 1);
    assert_eq!(raw.rejects[0].line, 501);
}

#[test]
fn many_malformed_rows_fail_the_load() {
    let ratings: String = (0..100).map(|n| format!("{}\t1\tbad\t0\n", n % 10 + 1)).collect();
    let dir = ml100k_dir(&ratings);
    assert!(matches!(
        load_movielens(dir.path(), Schema::Ml100k),
        Err(DataError::TooManyRejects { .. })
    ));
}

#[test]
fn empty_ratings_file_gives_empty_dataset() {
    let dir = ml100k_dir("");
    let raw = load_movielens(dir.path(), Schema::Ml100k).unwrap();
    assert!(raw.interactions.is_empty());
    assert_eq!(raw.users.len(), 10);
    assert_eq!(raw.items.len(), 100);
}

#[test]
fn missing_directory_is_an_io_error() {
    let err = load_movielens(Path::new("/nonexistent/ml-100k"), Schema::Ml100k).unwrap_err();
    assert!(matches!(err, DataError::Io { .. }));
}

#[test]
fn ml1m_excerpt_parses() {
    let raw = load_movielens(&fixture("ml-1m"), Schema::Ml1m).unwrap();
    assert_eq!(raw.users.len(), 10);
    assert_eq!(raw.items.len(), 20);
    assert_eq!(raw.interactions.len(), 131);
    assert!(raw.rejects.is_empty());
    assert_eq!(raw.users[0].contents["gender"], vec!["F".to_string()]);
    let toy_story = raw.items.iter().find(|r| r.id == "1").unwrap();
    assert_eq!(toy_story.contents["year"], vec!["1995".to_string()]);
    assert_eq!(toy_story.contents["genre"].len(), 3);
    let users = data::encode_users(&raw, "gender").unwrap();
    assert_eq!(users.sensitive_classes().unwrap(), ["F", "M"]);
}

#[test]
fn bookcrossing_excerpt_parses() {
    let raw = load_movielens(&fixture("bookcrossing"), Schema::Bookcrossing).unwrap();
    assert_eq!(raw.users.len(), 10);
    assert_eq!(raw.items.len(), 20);
    assert_eq!(raw.interactions.len(), 98);
    assert_eq!(raw.implicit_skipped, 21);
    assert_eq!((raw.rating_min, raw.rating_max), (1, 10));
    assert_eq!(raw.users[0].contents["location"], vec!["usa".to_string()]);
    assert!(raw.users[0].contents["age"].is_empty());
    let beloved = raw.items.iter().find(|r| r.id == "0452264464").unwrap();
    assert!(beloved.contents["year"].is_empty());
    let users = data::encode_users(&raw, "age").unwrap();
    assert_eq!(users.sensitive_classes().unwrap(), ["old", "young"]);
}
