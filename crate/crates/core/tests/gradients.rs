mod common;

use sac_core::gradcheck::{
    check_directions_with, coordinate_directions, ot_build, ot_directions, ot_suite, random_ot_instance,
    random_sac_case, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE,
};
use sac_core::localizer::{self, AttentionMode, LocalizerConfig};
use sac_core::ot::SinkhornConfig;
use sac_core::sac::SacConfig;
use sac_core::Graph;

#[test]
fn transport_gradients_match_reference_differences() {
    let cfg = SinkhornConfig::default();
    let mut worst = GradCheckReport::default();
    for seed in 0..6 {
        let t = [4, 8, 16][seed as usize % 3];
        let p = random_ot_instance(seed, t);
        let build = ot_build(cfg);
        let r = check_directions_with(&p, &ot_directions(t), DEFAULT_STEP, &build, |q| common::ot_value(q, &cfg))
            .unwrap();
        worst.merge(r);
    }
    assert!(worst.passes(DEFAULT_TOLERANCE), "{worst:?}");
}

#[test]
fn reference_evaluator_agrees_with_solver() {
    let cfg = SinkhornConfig::default();
    for (seed, t) in [(0, 4), (1, 16), (2, 64)] {
        let p = random_ot_instance(seed, t);
        let mut g = Graph::new();
        let loss = ot_build(cfg)(&mut g, &p).unwrap();
        let reference = common::ot_value(&p, &cfg).unwrap();
        assert!((g.value(loss).item() - reference).abs() < 1e-9 * reference.abs().max(1.0));
    }
}

#[test]
fn plain_differences_are_usable_on_large_gradients() {
    // f64 differences lose digits through the 1/ε scaling, so only the
    // coarse tolerance is asserted here
    let r = ot_suite(11, 6, &SinkhornConfig::default(), DEFAULT_STEP).unwrap();
    assert!(r.passes(1e-2), "{r:?}");
}

#[test]
fn attention_gradients_match_reference_differences() {
    let cfg = SacConfig {
        embed_width: 4,
        ..Default::default()
    };
    for seed in 0..2 {
        let case = random_sac_case(seed, 3, 12, cfg.clone());
        let build = case.build();
        let r = check_directions_with(
            &case.params,
            &coordinate_directions(&case.params),
            DEFAULT_STEP,
            &build,
            |q| common::sac_value(&case, q),
        )
        .unwrap();
        assert!(r.passes(DEFAULT_TOLERANCE), "seed {seed}: {r:?}");
    }
}

#[test]
fn localizer_cross_entropy_gradients() {
    let data = sac_core::datagen::generate(&sac_core::datagen::SynthConfig {
        train_videos: 1,
        test_videos: 1,
        frames: 12,
        dim: 3,
        action_len: (2, 4),
        ..Default::default()
    })
    .unwrap();
    let video = &data.videos[0];
    for mode in [AttentionMode::None, AttentionMode::Predicted, AttentionMode::Composed] {
        let cfg = LocalizerConfig {
            mode,
            hidden: 5,
            sac: SacConfig {
                embed_width: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        let params = localizer::init_params(3, &cfg);
        let r = sac_core::gradcheck::check_params(&params, DEFAULT_STEP, |g, p| {
            Ok(localizer::video_objective(g, p, video, &cfg)?.0)
        })
        .unwrap();
        assert!(r.passes(DEFAULT_TOLERANCE), "{mode}: {r:?}");
    }
}
