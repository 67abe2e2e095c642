use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{ContentKind, ContentSpec, DataError, Interaction, RawDataset, Record, RowReject};

/// Rows that fail to parse are tolerated up to this fraction of a file.
const MAX_REJECT_FRACTION: f64 = 0.01;

pub(crate) const ML100K_GENRES: [&str; 19] = [
    "unknown",
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Ml100k,
    Ml1m,
    Bookcrossing,
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::Ml100k => "ml100k",
            Schema::Ml1m => "ml1m",
            Schema::Bookcrossing => "bookcrossing",
        })
    }
}

impl FromStr for Schema {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ml100k" => Ok(Schema::Ml100k),
            "ml1m" => Ok(Schema::Ml1m),
            "bookcrossing" | "bx" => Ok(Schema::Bookcrossing),
            other => Err(DataError::Config(format!("unknown schema '{other}'"))),
        }
    }
}

impl Schema {
    /// File names as (ratings, users, items).
    pub fn files(self) -> [&'static str; 3] {
        match self {
            Schema::Ml100k => ["u.data", "u.user", "u.item"],
            Schema::Ml1m => ["ratings.dat", "users.dat", "movies.dat"],
            Schema::Bookcrossing => ["BX-Book-Ratings.csv", "BX-Users.csv", "BX-Books.csv"],
        }
    }

    fn rating_range(self) -> (u8, u8) {
        match self {
            Schema::Ml100k | Schema::Ml1m => (1, 5),
            Schema::Bookcrossing => (1, 10),
        }
    }

    pub(crate) fn user_contents(self) -> Vec<ContentSpec> {
        match self {
            Schema::Ml100k | Schema::Ml1m => vec![
                ContentSpec::new("age", ContentKind::AgeBands),
                ContentSpec::new("gender", ContentKind::Categorical),
                ContentSpec::new("occupation", ContentKind::Categorical),
                ContentSpec::new("zip", ContentKind::ZipPrefix),
            ],
            Schema::Bookcrossing => vec![
                ContentSpec::new("age", ContentKind::MedianSplit),
                ContentSpec::new("location", ContentKind::Categorical),
            ],
        }
    }

    pub(crate) fn item_contents(self) -> Vec<ContentSpec> {
        match self {
            Schema::Ml100k | Schema::Ml1m => vec![
                ContentSpec::new("genre", ContentKind::MultiValued),
                ContentSpec::new("year", ContentKind::Categorical),
            ],
            Schema::Bookcrossing => vec![
                ContentSpec::new("author", ContentKind::Categorical),
                ContentSpec::new("publisher", ContentKind::Categorical),
                ContentSpec::new("year", ContentKind::Categorical),
            ],
        }
    }
}

/// Loads a MovieLens-style dataset directory (ML-100K, ML-1M, or the
/// BookCrossing CSV dump, which shares the users/items/ratings layout).
pub fn load_movielens(dir: &Path, schema: Schema) -> Result<RawDataset, DataError> {
    load_raw(dir, schema)
}

pub fn load_raw(dir: &Path, schema: Schema) -> Result<RawDataset, DataError> {
    let [ratings_file, users_file, items_file] = schema.files();
    let mut rejects = Vec::new();

    let user_text = read_latin1(&dir.join(users_file))?;
    let item_text = read_latin1(&dir.join(items_file))?;
    let rating_text = read_latin1(&dir.join(ratings_file))?;

    let (users, user_rej, user_total) = parse_table(&user_text, users_file, schema, parse_user);
    check_rejects(users_file, &user_rej, user_total)?;
    rejects.extend(user_rej);

    let (mut items, item_rej, item_total) = parse_table(&item_text, items_file, schema, parse_item);
    check_rejects(items_file, &item_rej, item_total)?;
    rejects.extend(item_rej);
    items.sort_by(|a, b| natural_cmp(&a.id, &b.id));

    let user_index: HashMap<&str, usize> =
        users.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let item_index: HashMap<&str, usize> =
        items.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();

    let (rating_min, rating_max) = schema.rating_range();
    let mut interactions = Vec::new();
    let mut rating_rej = Vec::new();
    let mut dangling = 0;
    let mut implicit_skipped = 0;
    let mut total = 0;
    for (line_no, line) in rating_text.lines().enumerate() {
        if line.trim().is_empty() || (schema == Schema::Bookcrossing && line_no == 0) {
            continue;
        }
        total += 1;
        let reject = |reason: String| RowReject {
            file: ratings_file.to_string(),
            line: line_no + 1,
            reason,
        };
        let fields = split_fields(line, schema);
        let parsed = match schema {
            Schema::Ml100k | Schema::Ml1m => parse_ml_rating(&fields),
            Schema::Bookcrossing => parse_bx_rating(&fields, line_no as i64),
        };
        let (uid, iid, rating, ts) = match parsed {
            Ok(v) => v,
            Err(e) => {
                rating_rej.push(reject(e));
                continue;
            }
        };
        if schema == Schema::Bookcrossing && rating == 0 {
            implicit_skipped += 1;
            continue;
        }
        if rating < rating_min || rating > rating_max {
            rating_rej.push(reject(format!(
                "rating {rating} outside {rating_min}..={rating_max}"
            )));
            continue;
        }
        match (user_index.get(uid.as_str()), item_index.get(iid.as_str())) {
            (Some(&user), Some(&item)) => interactions.push(Interaction {
                user,
                item,
                rating,
                timestamp: ts,
            }),
            _ => dangling += 1,
        }
    }
    check_rejects(ratings_file, &rating_rej, total)?;
    if !rating_rej.is_empty() {
        warn!("{ratings_file}: rejected {} of {total} rows", rating_rej.len());
    }
    rejects.extend(rating_rej);
    if interactions.is_empty() {
        warn!("{}: no interactions loaded", dir.join(ratings_file).display());
    }
    if dangling > 0 {
        warn!("{ratings_file}: dropped {dangling} rows naming unknown users or items");
    }

    let raw = RawDataset {
        schema,
        users,
        items,
        interactions,
        rating_min,
        rating_max,
        user_contents: schema.user_contents(),
        item_contents: schema.item_contents(),
        rejects,
        dangling,
        implicit_skipped,
    };
    raw.validate()?;
    Ok(raw)
}

fn read_latin1(path: &Path) -> Result<String, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: PathBuf::from(path),
        source,
    })?;
    Ok(match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => e.into_bytes().into_iter().map(char::from).collect(),
    })
}

fn check_rejects(file: &str, rejects: &[RowReject], total: usize) -> Result<(), DataError> {
    if total > 0 && rejects.len() as f64 > MAX_REJECT_FRACTION * total as f64 {
        return Err(DataError::TooManyRejects {
            file: file.to_string(),
            rejected: rejects.len(),
            total,
            first: rejects
                .first()
                .map(|r| format!("line {}: {}", r.line, r.reason))
                .unwrap_or_default(),
        });
    }
    Ok(())
}

type RowParser = fn(&[String], Schema) -> Result<Record, String>;

fn parse_table(
    text: &str,
    file: &str,
    schema: Schema,
    parse: RowParser,
) -> (Vec<Record>, Vec<RowReject>, usize) {
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut total = 0;
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (schema == Schema::Bookcrossing && line_no == 0) {
            continue;
        }
        total += 1;
        match parse(&split_fields(line, schema), schema) {
            Ok(r) => records.push(r),
            Err(reason) => rejects.push(RowReject {
                file: file.to_string(),
                line: line_no + 1,
                reason,
            }),
        }
    }
    (records, rejects, total)
}

fn split_fields(line: &str, schema: Schema) -> Vec<String> {
    match schema {
        Schema::Ml100k => {
            let sep = if line.contains('|') { '|' } else { '\t' };
            line.split(sep).map(str::to_string).collect()
        }
        Schema::Ml1m => line.split("::").map(str::to_string).collect(),
        Schema::Bookcrossing => split_bx(line),
    }
}

/// BookCrossing rows: `"a";"b";"c"` with backslash-escaped quotes.
fn split_bx(line: &str) -> Vec<String> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b';')
        .has_headers(false)
        .escape(Some(b'\\'))
        .flexible(true)
        .from_reader(line.as_bytes());
    rdr.records()
        .next()
        .and_then(Result::ok)
        .map(|r| r.iter().map(str::to_string).collect())
        .unwrap_or_default()
}

fn field<'a>(fields: &'a [String], i: usize, what: &str) -> Result<&'a str, String> {
    fields
        .get(i)
        .map(|s| s.trim())
        .ok_or_else(|| format!("missing {what}"))
}

fn non_empty(value: &str) -> Vec<String> {
    let v = value.trim();
    if v.is_empty() || v.eq_ignore_ascii_case("null") {
        Vec::new()
    } else {
        vec![v.to_string()]
    }
}

fn parse_user(fields: &[String], schema: Schema) -> Result<Record, String> {
    let mut contents = BTreeMap::new();
    let id = field(fields, 0, "user id")?.to_string();
    if id.is_empty() {
        return Err("empty user id".into());
    }
    match schema {
        // id|age|gender|occupation|zip
        Schema::Ml100k => {
            if fields.len() < 5 {
                return Err(format!("expected 5 fields, got {}", fields.len()));
            }
            let age = field(fields, 1, "age")?;
            age.parse::<u32>().map_err(|_| format!("bad age '{age}'"))?;
            contents.insert("age".into(), non_empty(age));
            contents.insert("gender".into(), non_empty(field(fields, 2, "gender")?));
            contents.insert("occupation".into(), non_empty(field(fields, 3, "occupation")?));
            contents.insert("zip".into(), non_empty(field(fields, 4, "zip")?));
        }
        // id::gender::age::occupation::zip
        Schema::Ml1m => {
            if fields.len() < 5 {
                return Err(format!("expected 5 fields, got {}", fields.len()));
            }
            let age = field(fields, 2, "age")?;
            age.parse::<u32>().map_err(|_| format!("bad age '{age}'"))?;
            contents.insert("gender".into(), non_empty(field(fields, 1, "gender")?));
            contents.insert("age".into(), non_empty(age));
            contents.insert("occupation".into(), non_empty(field(fields, 3, "occupation")?));
            contents.insert("zip".into(), non_empty(field(fields, 4, "zip")?));
        }
        // "User-ID";"Location";"Age"
        Schema::Bookcrossing => {
            let location = field(fields, 1, "location")?;
            let country = location
                .rsplit(',')
                .next()
                .map(str::trim)
                .filter(|c| !c.is_empty())
                .unwrap_or("unknown");
            contents.insert("location".into(), vec![country.to_string()]);
            let age = fields.get(2).map(|s| s.trim()).unwrap_or("");
            let age = if age.parse::<f64>().is_ok() { age } else { "" };
            contents.insert("age".into(), non_empty(age));
        }
    }
    Ok(Record { id, contents })
}

fn parse_item(fields: &[String], schema: Schema) -> Result<Record, String> {
    let mut contents = BTreeMap::new();
    let id = field(fields, 0, "item id")?.to_string();
    if id.is_empty() {
        return Err("empty item id".into());
    }
    match schema {
        // id|title|release date|video release date|url|19 genre flags
        Schema::Ml100k => {
            if fields.len() < 5 + ML100K_GENRES.len() {
                return Err(format!("expected 24 fields, got {}", fields.len()));
            }
            let date = field(fields, 2, "release date")?;
            let year = date.rsplit('-').next().unwrap_or("").trim();
            contents.insert("year".into(), non_empty(year));
            let mut genres = Vec::new();
            for (g, flag) in ML100K_GENRES.iter().zip(&fields[5..5 + ML100K_GENRES.len()]) {
                match flag.trim() {
                    "1" => genres.push(g.to_string()),
                    "0" => {}
                    other => return Err(format!("bad genre flag '{other}'")),
                }
            }
            contents.insert("genre".into(), genres);
        }
        // id::Title (Year)::Genre|Genre
        Schema::Ml1m => {
            if fields.len() < 3 {
                return Err(format!("expected 3 fields, got {}", fields.len()));
            }
            let title = field(fields, 1, "title")?;
            let year = title
                .rfind('(')
                .map(|p| title[p + 1..].trim_end_matches(')').trim())
                .unwrap_or("");
            contents.insert("year".into(), non_empty(year));
            let genres = field(fields, 2, "genres")?
                .split('|')
                .filter(|g| !g.is_empty())
                .map(str::to_string)
                .collect();
            contents.insert("genre".into(), genres);
        }
        // "ISBN";"Book-Title";"Book-Author";"Year-Of-Publication";"Publisher";...
        Schema::Bookcrossing => {
            if fields.len() < 5 {
                return Err(format!("expected at least 5 fields, got {}", fields.len()));
            }
            contents.insert("author".into(), non_empty(field(fields, 2, "author")?));
            let year = field(fields, 3, "year")?;
            let year = if year == "0" { "" } else { year };
            contents.insert("year".into(), non_empty(year));
            contents.insert("publisher".into(), non_empty(field(fields, 4, "publisher")?));
        }
    }
    Ok(Record { id, contents })
}

fn parse_ml_rating(fields: &[String]) -> Result<(String, String, u8, i64), String> {
    if fields.len() < 4 {
        return Err(format!("expected 4 fields, got {}", fields.len()));
    }
    let rating = fields[2].trim();
    let rating: u8 = rating.parse().map_err(|_| format!("bad rating '{rating}'"))?;
    let ts = fields[3].trim();
    let ts: i64 = ts.parse().map_err(|_| format!("bad timestamp '{ts}'"))?;
    Ok((fields[0].trim().to_string(), fields[1].trim().to_string(), rating, ts))
}

/// BookCrossing has no timestamps; file order stands in for time.
fn parse_bx_rating(fields: &[String], line_no: i64) -> Result<(String, String, u8, i64), String> {
    if fields.len() < 3 {
        return Err(format!("expected 3 fields, got {}", fields.len()));
    }
    let rating = fields[2].trim();
    let rating: u8 = rating.parse().map_err(|_| format!("bad rating '{rating}'"))?;
    Ok((fields[0].trim().to_string(), fields[1].trim().to_string(), rating, line_no))
}

/// Numeric comparison when both sides parse as numbers, lexicographic
/// otherwise; numbers sort before words.
pub(crate) fn natural_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b)),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}
