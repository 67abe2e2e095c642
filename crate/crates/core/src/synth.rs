//! Synthetic ratings with a planted, tunable sensitive-attribute signal.
//!
//! Each user has a balanced binary attribute `a` and a latent taste `u`; each
//! item has a latent vector `v`. Ratings are
//! `clip(round(mid + ⟨u, v⟩/√d + βb·(2a − 1)·c·v₀ + ε))`, so the attribute
//! shifts ratings along the item direction `v₀`. Item genres are the sign
//! pattern of `v`, which makes genre 0 the attribute-aligned one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Interaction, RawDataset, Record, Schema, MIN_INTERACTIONS, ML100K_GENRES};
use crate::metrics::{auc, AttackerConfig, AttackerModel};

const OCCUPATIONS: [&str; 5] = ["engineer", "educator", "student", "artist", "other"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub ratings_per_user: usize,
    pub n_rating_levels: u8,
    /// βb in `[0, 1]`.
    pub bias_strength: f64,
    pub latent_dim: usize,
    /// Scale `c` of the attribute offset at βb = 1.
    pub bias_scale: f64,
    /// Standard deviation of the rating noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 800,
            ratings_per_user: 40,
            n_rating_levels: 5,
            bias_strength: 0.75,
            latent_dim: 8,
            bias_scale: 1.0,
            noise: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return bad(format!("bias_strength {} outside [0, 1]", self.bias_strength));
        }
        if self.ratings_per_user < MIN_INTERACTIONS {
            return bad(format!("ratings_per_user must be at least {MIN_INTERACTIONS}"));
        }
        if self.ratings_per_user > self.n_items {
            return bad("ratings_per_user exceeds n_items".into());
        }
        if self.n_users < 2 || self.latent_dim == 0 || self.n_rating_levels < 2 {
            return bad("need at least 2 users, 2 rating levels and a positive latent_dim".into());
        }
        if !(self.noise >= 0.0 && self.bias_scale >= 0.0) {
            return bad("noise and bias_scale must be non-negative".into());
        }
        Ok(())
    }

    fn genres(&self) -> usize {
        self.latent_dim.min(ML100K_GENRES.len() - 1)
    }
}

/// Generates a dataset in the ML-100K content layout (ages, gender,
/// occupation, zip; genre and year), gender carrying the planted attribute.
pub fn generate(cfg: &SynthConfig) -> Result<RawDataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.latent_dim;
    let gaussian = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };

    let mut attrs: Vec<usize> = (0..cfg.n_users).map(|u| u % 2).collect();
    attrs.shuffle(&mut rng);
    let tastes: Vec<Vec<f64>> = (0..cfg.n_users).map(|_| gaussian(&mut rng, d)).collect();
    let latents: Vec<Vec<f64>> = (0..cfg.n_items).map(|_| gaussian(&mut rng, d)).collect();

    let users = (0..cfg.n_users)
        .map(|u| {
            let mut c = BTreeMap::new();
            c.insert("gender".to_string(), vec![if attrs[u] == 1 { "M" } else { "F" }.to_string()]);
            c.insert("age".to_string(), vec![rng.gen_range(18..65u32).to_string()]);
            c.insert(
                "occupation".to_string(),
                vec![OCCUPATIONS[rng.gen_range(0..OCCUPATIONS.len())].to_string()],
            );
            c.insert("zip".to_string(), vec![format!("{:05}", rng.gen_range(0..100_000u32))]);
            Record {
                id: (u + 1).to_string(),
                contents: c,
            }
        })
        .collect();

    let genres = cfg.genres();
    let items = latents
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut g: Vec<String> = (0..genres)
                .filter(|&k| v[k] > 0.0)
                .map(|k| ML100K_GENRES[k + 1].to_string())
                .collect();
            if g.is_empty() {
                g.push(ML100K_GENRES[0].to_string());
            }
            let mut c = BTreeMap::new();
            c.insert("genre".to_string(), g);
            c.insert("year".to_string(), vec![rng.gen_range(1980..2000u32).to_string()]);
            Record {
                id: (i + 1).to_string(),
                contents: c,
            }
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let levels = cfg.n_rating_levels as f64;
    let mid = (1.0 + levels) / 2.0;
    let scale = (d as f64).sqrt();
    let mut interactions = Vec::with_capacity(cfg.n_users * cfg.ratings_per_user);
    for u in 0..cfg.n_users {
        let sign = 2.0 * attrs[u] as f64 - 1.0;
        for (t, i) in sample(&mut rng, cfg.n_items, cfg.ratings_per_user).into_iter().enumerate() {
            let v = &latents[i];
            let affinity: f64 = tastes[u].iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / scale;
            let eps = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let raw = mid + affinity + cfg.bias_strength * sign * cfg.bias_scale * v[0] + eps;
            let rating = raw.round().clamp(1.0, levels) as u8;
            interactions.push(Interaction {
                user: u,
                item: i,
                rating,
                timestamp: 880_000_000 + t as i64,
            });
        }
    }

    let raw = RawDataset {
        schema: Schema::Ml100k,
        users,
        items,
        interactions,
        rating_min: 1,
        rating_max: cfg.n_rating_levels,
        user_contents: Schema::Ml100k.user_contents(),
        item_contents: Schema::Ml100k.item_contents(),
        rejects: Vec::new(),
        dangling: 0,
        implicit_skipped: 0,
    };
    raw.validate()?;
    Ok(raw)
}

/// Writes `u.data`, `u.user` and `u.item` so the ML-100K loader reads the
/// dataset back unchanged.
pub fn write_ml100k(raw: &RawDataset, dir: &Path) -> Result<(), DataError> {
    if raw.rating_min != 1 || raw.rating_max != 5 {
        return Err(DataError::Config("the ML-100K layout holds ratings 1..=5 only".into()));
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let first = |r: &Record, key: &str| r.contents.get(key).and_then(|v| v.first().cloned()).unwrap_or_default();

    let mut data = Vec::new();
    for i in &raw.interactions {
        writeln!(data, "{}\t{}\t{}\t{}", raw.users[i.user].id, raw.items[i.item].id, i.rating, i.timestamp)
            .expect("write to memory");
    }
    let mut users = Vec::new();
    for u in &raw.users {
        writeln!(
            users,
            "{}|{}|{}|{}|{}",
            u.id,
            first(u, "age"),
            first(u, "gender"),
            first(u, "occupation"),
            first(u, "zip")
        )
        .expect("write to memory");
    }
    let mut items = Vec::new();
    for it in &raw.items {
        let genres = it.contents.get("genre").cloned().unwrap_or_default();
        let flags: Vec<&str> = ML100K_GENRES
            .iter()
            .map(|g| if genres.iter().any(|x| x == g) { "1" } else { "0" })
            .collect();
        let year = first(it, "year");
        let date = if year.is_empty() { String::new() } else { format!("01-Jan-{year}") };
        writeln!(items, "{}|Item {}|{}||none|{}", it.id, it.id, date, flags.join("|")).expect("write to memory");
    }
    for (name, bytes) in [("u.data", data), ("u.user", users), ("u.item", items)] {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io(&path))?;
    }
    Ok(())
}

/// Per-user features: mean rating on items with and without each genre,
/// relative to the user's overall mean.
pub fn genre_rating_features(raw: &RawDataset) -> Vec<Vec<f64>> {
    let mut genre_names: Vec<String> = raw
        .items
        .iter()
        .flat_map(|i| i.contents.get("genre").cloned().unwrap_or_default())
        .collect();
    genre_names.sort();
    genre_names.dedup();
    let k = genre_names.len();
    let item_genres: Vec<Vec<bool>> = raw
        .items
        .iter()
        .map(|i| {
            let g = i.contents.get("genre").cloned().unwrap_or_default();
            genre_names.iter().map(|n| g.contains(n)).collect()
        })
        .collect();
    let mut sums = vec![vec![(0.0, 0.0, 0.0, 0.0); k]; raw.users.len()];
    let mut totals = vec![(0.0, 0.0); raw.users.len()];
    for i in &raw.interactions {
        let r = i.rating as f64;
        totals[i.user].0 += r;
        totals[i.user].1 += 1.0;
        for (g, has) in item_genres[i.item].iter().enumerate() {
            let s = &mut sums[i.user][g];
            if *has {
                s.0 += r;
                s.1 += 1.0;
            } else {
                s.2 += r;
                s.3 += 1.0;
            }
        }
    }
    sums.iter()
        .zip(&totals)
        .map(|(per_genre, &(t, n))| {
            let overall = if n > 0.0 { t / n } else { 0.0 };
            let mean = |s: f64, c: f64| if c > 0.0 { s / c - overall } else { 0.0 };
            per_genre.iter().map(|&(a, b, c, d)| mean(a, b) - mean(c, d)).collect()
        })
        .collect()
}

/// AUC of a logistic attacker trained on half of the users' genre-rating
/// features and scored on the other half; a proxy for how recoverable the
/// attribute is from rating behaviour alone.
pub fn proxy_attacker_auc(raw: &RawDataset, sensitive: &str, seed: u64) -> Result<f64, DataError> {
    let features = genre_rating_features(raw);
    let labels: Vec<Option<usize>> = raw
        .users
        .iter()
        .map(|u| match u.contents.get(sensitive).and_then(|v| v.first()).map(String::as_str) {
            Some("F") => Some(0),
            Some("M") => Some(1),
            _ => None,
        })
        .collect();
    let mut idx: Vec<usize> = (0..raw.users.len()).filter(|&u| labels[u].is_some()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = idx.split_at(idx.len() / 2);
    let pick = |s: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            s.iter().map(|&u| features[u].clone()).collect(),
            s.iter().map(|&u| labels[u].expect("filtered")).collect(),
        )
    };
    let (tx, ty) = pick(train);
    let (ex, ey) = pick(test);
    let model = AttackerModel::fit(&tx, &ty, 2, AttackerConfig::default()).map_err(|e| DataError::Config(e.to_string()))?;
    let scores: Vec<f64> = ex.iter().map(|f| model.probabilities(f)[1]).collect();
    let positive: Vec<bool> = ey.iter().map(|&l| l == 1).collect();
    auc(&scores, &positive).map_err(|e| DataError::Config(e.to_string()))
}
