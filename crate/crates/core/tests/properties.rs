use std::str::FromStr;

use proptest::prelude::*;

use vidrep::data::{build_contrastive, collect_trajectories, collect_video, multistep_per_episode, read_dataset, write_trajectories, write_video, KMode, NegativeSampling};
use vidrep::decoder::DecoderClass;
use vidrep::envs::{make_lock_env, random_block_mdp, LockEnvConfig, RandomLimits};
use vidrep::experiments::partition_class;
use vidrep::mdp::latent_occupancy;
use vidrep::oracle::{check_margin_relations, exact_video_distribution, ExactModel, PopulationOptions};
use vidrep::replearn::{erm_autoencoder, erm_contrastive, erm_forward, erm_population, ForwardHeadKind, Objective};

fn noisy_lock() -> vidrep::envs::EnvInstance {
    let cfg = LockEnvConfig { n_exo: 1, n_iid: 1, ..Default::default() };
    make_lock_env(3, 2, 3, &cfg).unwrap()
}

/// Every decoder followed by a cyclic shift of its outputs.
fn with_relabels(class: &DecoderClass) -> DecoderClass {
    let mut out = Vec::new();
    for d in &class.decoders {
        let perm: Vec<u32> = (0..d.n_out as u32).map(|u| (u + 1) % d.n_out as u32).collect();
        out.push(d.clone());
        out.push(d.relabeled(&perm));
    }
    DecoderClass::new(out)
}

fn assert_pairwise_equal(losses: &[f64]) {
    for pair in losses.chunks(2) {
        assert!((pair[0] - pair[1]).abs() < 1e-12, "{pair:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_instances_satisfy_margin_relations(seed in any::<u64>()) {
        let inst = random_block_mdp(seed, &RandomLimits::default()).unwrap();
        let m = ExactModel::new(&inst.spec, &inst.data_mixture).unwrap().margins();
        let check = check_margin_relations(&m);
        prop_assert!(check.passed(), "{:?}", check.violations);
    }

    #[test]
    fn occupancies_and_videos_normalise(seed in any::<u64>()) {
        let inst = random_block_mdp(seed, &RandomLimits::default()).unwrap();
        for row in latent_occupancy(&inst.spec, &inst.data_mixture).unwrap() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let video = exact_video_distribution(&inst.spec, &inst.data_mixture, Some(2)).unwrap();
        prop_assert!((video.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn erm_losses_ignore_output_labels(seed in 0u64..1000) {
        let inst = noisy_lock();
        let class = with_relabels(&partition_class(&inst, 3));
        let video = collect_video(&inst.spec, &inst.data_mixture, 300, seed).unwrap();
        let ms = multistep_per_episode(&video, KMode::Fixed(1), seed).unwrap();
        assert_pairwise_equal(&erm_forward(&class, &ms, ForwardHeadKind::Factored).unwrap().losses);
        let pairs = build_contrastive(&video, KMode::Fixed(1), NegativeSampling::PartnerFirst, seed).unwrap();
        assert_pairwise_equal(&erm_contrastive(&class, &pairs).unwrap().losses);
        assert_pairwise_equal(&erm_autoencoder(&class, &video).unwrap().losses);
    }

    #[test]
    fn k_mode_text_roundtrip(k in 1usize..50, uniform in any::<bool>()) {
        let mode = if uniform { KMode::Uniform(k) } else { KMode::Fixed(k) };
        prop_assert_eq!(KMode::from_str(&mode.to_string()).unwrap(), mode);
        let json = serde_json::to_string(&mode).unwrap();
        prop_assert_eq!(serde_json::from_str::<KMode>(&json).unwrap(), mode);
        let w: f64 = mode.support().map(|j| mode.weight(j)).sum();
        prop_assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jsonl_roundtrip(seed in any::<u64>(), n in 1usize..40) {
        let inst = noisy_lock();
        let traj = collect_trajectories(&inst.spec, &inst.data_mixture, n, seed).unwrap();
        let mut buf = Vec::new();
        write_trajectories(&traj, Some(KMode::Uniform(1)), &mut buf).unwrap();
        let (k, back) = read_dataset(buf.as_slice()).unwrap();
        prop_assert_eq!(k, Some(KMode::Uniform(1)));
        prop_assert_eq!(back.unwrap(), traj.clone());

        let mut buf = Vec::new();
        write_video(&traj.video, None, &mut buf).unwrap();
        let (k, back) = read_dataset(buf.as_slice()).unwrap();
        prop_assert_eq!(k, None);
        prop_assert_eq!(back.unwrap_err(), traj.video);
    }
}

#[test]
fn population_losses_ignore_output_labels() {
    let inst = noisy_lock();
    let class = with_relabels(&partition_class(&inst, 3));
    let model = ExactModel::new(&inst.spec, &inst.data_mixture).unwrap();
    for obj in [Objective::Forward, Objective::Contrastive, Objective::Autoencoder, Objective::Acro] {
        for negatives in [NegativeSampling::PartnerFirst, NegativeSampling::FreshRho, NegativeSampling::PartnerNext] {
            let opts = PopulationOptions { negatives, ..Default::default() };
            assert_pairwise_equal(&erm_population(&class, &model, obj, &opts).unwrap().losses);
        }
    }
}

#[test]
fn population_erm_recovers_the_lock_state() {
    let inst = make_lock_env(3, 2, 4, &LockEnvConfig { n_iid: 2, ..Default::default() }).unwrap();
    let class = partition_class(&inst, 3);
    let model = ExactModel::new(&inst.spec, &inst.data_mixture).unwrap();
    for obj in [Objective::Forward, Objective::Contrastive, Objective::Acro] {
        let learned = erm_population(&class, &model, obj, &Default::default()).unwrap();
        assert!(learned.decoder.endo_alignment(&inst.spec).is_some(), "{obj}: {}", learned.decoder.name);
    }
}
