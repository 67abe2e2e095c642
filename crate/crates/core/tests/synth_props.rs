use fairmeta::data;
use fairmeta::synth::{generate, proxy_attacker_auc, SynthConfig};
use proptest::prelude::*;

#[test]
fn proxy_attacker_auc_grows_with_bias_strength() {
    let means: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&bias| {
            (0..3)
                .map(|seed| {
                    let cfg = SynthConfig {
                        n_users: 500,
                        bias_strength: bias,
                        seed,
                        ..SynthConfig::default()
                    };
                    proxy_attacker_auc(&generate(&cfg).unwrap(), "gender", seed).unwrap()
                })
                .sum::<f64>()
                / 3.0
        })
        .collect();
    assert!(means.windows(2).all(|w| w[0] <= w[1]), "{means:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_data_passes_the_data_pipeline(
        users in 20usize..80,
        per_user in 13usize..30,
        bias in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let cfg = SynthConfig { n_users: users, n_items: 60, ratings_per_user: per_user, bias_strength: bias, seed, ..SynthConfig::default() };
        let raw = generate(&cfg).unwrap();
        raw.validate().unwrap();
        prop_assert_eq!(raw.interactions.len(), users * per_user);
        let prepared = data::prepare(raw, "gender", (0.7, 0.1, 0.2), seed).unwrap();
        let t = &prepared.tasks;
        prop_assert_eq!(t.train.len() + t.valid.len() + t.test.len(), users);
        for task in t.train.iter().chain(&t.valid).chain(&t.test) {
            let last_support = task.support.pairs.iter().map(|p| p.timestamp).max().unwrap();
            let first_query = task.query.pairs.iter().map(|p| p.timestamp).min().unwrap();
            prop_assert!(last_support <= first_query);
            prop_assert_eq!(task.query.len(), data::QUERY_SIZE);
        }
    }
}
