use keytrace::evaluation::{
    background_sweep, gallery_from_splits, queries_from_gallery, split_profiles, ProfileSplit,
};
use keytrace::features::{featurize, FeatureSequence};
use keytrace::gallery::Gallery;
use keytrace::ingestion::{group_by_user, KeystrokeSequence};
use keytrace::model::{embed_all, train, ModelConfig, ModelWeights, Readout};
use keytrace::synth::{default_sentence_pool, generate_corpus, sample_population};

fn training_users(users: usize, separability: f64, seed: u64) -> Vec<Vec<FeatureSequence>> {
    let pool = default_sentence_pool();
    let pop = sample_population(users, separability, &[], seed).unwrap();
    group_by_user(generate_corpus(&pop, 15, &pool, seed).unwrap().sequences)
        .into_values()
        .map(|seqs| seqs.iter().map(|s| featurize(s, 50)).collect())
        .collect()
}

fn eval_gallery(weights: &ModelWeights, users: usize, separability: f64, seed: u64) -> Gallery {
    let pool = default_sentence_pool();
    let pop = sample_population(users, separability, &[], seed).unwrap();
    let corpus = generate_corpus(&pop, 15, &pool, seed).unwrap();
    let grouped = group_by_user(corpus.sequences);
    let embed = |set: &[KeystrokeSequence]| {
        embed_all(
            weights,
            &set.iter().map(|s| featurize(s, 50)).collect::<Vec<_>>(),
        )
        .unwrap()
    };
    let splits = split_profiles(&grouped, 10, 5, seed)
        .unwrap()
        .into_iter()
        .map(|s| ProfileSplit {
            verified: embed(&s.verified),
            anonymous: embed(&s.anonymous),
            user_id: s.user_id,
        })
        .collect();
    gallery_from_splits(splits, &corpus.profiles).unwrap()
}

fn rank_one(gallery: &Gallery, size: usize, seed: u64) -> f64 {
    let sweep = background_sweep(gallery, &[size], seed)
        .unwrap()
        .evaluate(gallery, &queries_from_gallery(gallery), None)
        .unwrap();
    sweep[0].raw.at(1)
}

#[test]
fn separable_population_is_identified_at_fifty() {
    let config = ModelConfig {
        readout: Readout::Mean,
        rng_seed: 1,
        ..ModelConfig::desk_scale()
    };
    let weights = train(&config, &training_users(200, 1.0, 100))
        .unwrap()
        .weights;
    let gallery = eval_gallery(&weights, 500, 1.0, 200);
    let r1 = rank_one(&gallery, 50, 5);
    assert!(r1 >= 0.9, "Rank-1 at N=50 is {r1}");
}

// Small fixed protocol per seed: train and evaluate at separability 0, 0.5 and 1.
#[test]
fn identification_improves_with_separability() {
    let levels = [0.0, 0.5, 1.0];
    let mut increasing = 0;
    let mut report = Vec::new();
    for seed in 0..5u64 {
        let r1: Vec<f64> = levels
            .iter()
            .map(|&sep| {
                let config = ModelConfig {
                    hidden_units: 8,
                    epochs: 8,
                    batches_per_epoch: 30,
                    rng_seed: seed,
                    ..ModelConfig::default()
                };
                let weights = train(&config, &training_users(60, sep, 10 + seed))
                    .unwrap()
                    .weights;
                rank_one(&eval_gallery(&weights, 100, sep, 20 + seed), 50, seed)
            })
            .collect();
        if r1.windows(2).all(|w| w[0] <= w[1]) {
            increasing += 1;
        }
        report.push(r1);
    }
    assert!(
        increasing >= 3,
        "Rank-1 per seed at separability {levels:?}: {report:?}"
    );
}
