//! Selection procedures checked against brute-force recomputation. An
//! untrained model is enough: these are statements about the argmin, not
//! about quality.

use pointprompt::data::SyntheticImage;
use pointprompt::lm::Prompt;
use pointprompt::mask::Mask;
use pointprompt::model::ModelBundle;
use pointprompt::tasks::caption::caption_region;
use pointprompt::tasks::dialogue::{dialogue_step, turn_rng, DialogueState};
use pointprompt::tasks::ris::{argmin_lowest, ris_score, ris_select, robustness_report, RisInstance};
use pointprompt::tasks::synthetic::synthetic_vcr;
use pointprompt::tasks::vcr::{vcr_answer, vcr_prompt};
use pointprompt::tasks::vqa::vqa_answer;
use pointprompt::tasks::{ImageStore, Role};
use pointprompt::train::{prepare, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (ModelBundle, ImageStore) {
    let cfg = TrainConfig {
        images: 60,
        eval_images: 0,
        ..TrainConfig::default()
    };
    let (model, train, _) = prepare(&cfg).unwrap();
    (model, ImageStore::from_dataset(&train))
}

fn random_mask(rng: &mut ChaCha8Rng, grid: usize) -> Mask {
    let mut cells = vec![false; grid * grid];
    let n = rng.random_range(0..5);
    for _ in 0..n {
        cells[rng.random_range(0..grid * grid)] = true;
    }
    Mask::from_cells(grid, grid, cells).unwrap()
}

fn random_instance(rng: &mut ChaCha8Rng, image: &SyntheticImage, i: usize) -> RisInstance {
    let n = rng.random_range(1..6);
    let mut proposals: Vec<Mask> = (0..n).map(|_| random_mask(rng, image.grid)).collect();
    if proposals.iter().all(Mask::is_empty) {
        proposals.push(image.objects[0].mask(image.grid));
    }
    // Duplicates exercise the tie rule.
    if rng.random_bool(0.3) {
        let dup = proposals[0].clone();
        proposals.push(dup);
    }
    RisInstance {
        id: format!("rand-{i}"),
        image_id: image.image_id.clone(),
        proposals,
        description: image.objects[0].caption(),
        ground_truth: Some(image.objects[0].mask(image.grid)),
    }
}

#[test]
fn ris_select_matches_brute_force_and_ignores_order() {
    let (model, store) = setup();
    let images: Vec<&SyntheticImage> = store.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..100 {
        let image = images[i % images.len()];
        let inst = random_instance(&mut rng, image, i);
        let sel = ris_select(&model, image, &inst, 5).unwrap();

        let features = model.features(image).unwrap();
        let brute: Vec<f64> = inst
            .proposals
            .iter()
            .map(|m| ris_score(&model, &features, m, &inst.description, 5, &inst.id).unwrap())
            .collect();
        assert_eq!(sel.scores, brute);
        let mut best = None;
        for (j, &s) in brute.iter().enumerate() {
            if s.is_finite() && best.is_none_or(|b: usize| s < brute[b]) {
                best = Some(j);
            }
        }
        assert_eq!(Some(sel.index), best);
        for (m, &s) in inst.proposals.iter().zip(&sel.scores) {
            assert_eq!(m.is_empty(), s.is_infinite());
            assert!(s >= 0.0);
        }

        // Shuffled proposals: the same mask wins.
        let mut perm: Vec<usize> = (0..inst.proposals.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled = RisInstance {
            proposals: perm.iter().map(|&j| inst.proposals[j].clone()).collect(),
            ..inst.clone()
        };
        let sel2 = ris_select(&model, image, &shuffled, 5).unwrap();
        assert_eq!(shuffled.proposals[sel2.index], inst.proposals[sel.index]);
    }
}

#[test]
fn ris_rejects_instances_without_usable_proposals() {
    let (model, store) = setup();
    let image = store.iter().next().unwrap();
    let inst = RisInstance {
        id: "x".into(),
        image_id: image.image_id.clone(),
        proposals: vec![Mask::empty(6, 6)],
        description: "red circle".into(),
        ground_truth: None,
    };
    assert!(ris_select(&model, image, &inst, 0).is_err());
    assert!(ris_select(
        &model,
        image,
        &RisInstance {
            proposals: vec![],
            ..inst
        },
        0
    )
    .is_err());
}

#[test]
fn robustness_rows_ascend_and_radius_zero_is_plain_ris() {
    let (model, store) = setup();
    let ds_images: Vec<&SyntheticImage> = store.iter().filter(|i| i.objects.len() >= 2).take(6).collect();
    let instances: Vec<RisInstance> = ds_images
        .iter()
        .map(|img| RisInstance {
            id: format!("r-{}", img.image_id),
            image_id: img.image_id.clone(),
            proposals: img.objects.iter().map(|o| o.mask(img.grid)).collect(),
            description: img.objects[1].caption(),
            ground_truth: Some(img.objects[1].mask(img.grid)),
        })
        .collect();
    let rows = robustness_report(&model, &store, &instances, &[15, 0, 7, 3], 1).unwrap();
    assert_eq!(rows.iter().map(|r| r.radius).collect::<Vec<_>>(), vec![0, 3, 7, 15]);

    let plain: Vec<Mask> = instances
        .iter()
        .map(|inst| {
            let sel = ris_select(&model, store.get(&inst.image_id).unwrap(), inst, 1).unwrap();
            inst.proposals[sel.index].clone()
        })
        .collect();
    let gts: Vec<Mask> = instances.iter().map(|i| i.ground_truth.clone().unwrap()).collect();
    let miou = pointprompt::tasks::compute_miou(&plain, &gts).unwrap();
    assert_eq!(rows[0].miou, miou);
    let only_zero = robustness_report(&model, &store, &instances, &[0], 1).unwrap();
    assert_eq!(only_zero, vec![rows[0].clone()]);
}

#[test]
fn vcr_answer_is_the_brute_force_argmin() {
    let (model, store) = setup();
    let ds = pointprompt::data::make_synthetic_dataset(
        &TrainConfig {
            images: 60,
            ..TrainConfig::default()
        }
        .synthetic_config(),
    )
    .unwrap();
    for rec in synthetic_vcr(&ds, 3).iter().take(20) {
        let image = store.get(&rec.image_id).unwrap();
        let ans = vcr_answer(&model, image, rec, 9).unwrap();
        assert_eq!(Some(ans.choice - 1), argmin_lowest(&ans.scores));
        assert!((1..=4).contains(&ans.choice));
        assert_eq!(ans, vcr_answer(&model, image, rec, 9).unwrap());
        assert!(ans.prompt.starts_with("[0]: <soft:8> [1]: <soft:8>"));
    }
}

#[test]
fn vcr_rigged_scores_pick_choice_three() {
    assert_eq!(argmin_lowest(&[2.0, 1.5, 0.2, 0.9]).map(|i| i + 1), Some(3));
    let vocab = pointprompt::Vocabulary::build(["a b c d"], 8).unwrap();
    let z = pointprompt::Tensor::zeros(&[1, 32]);
    let p: Prompt<f32> = vcr_prompt(&[z], "what is [0] ?", &["a", "b", "c", "d"].map(String::from), &vocab).unwrap();
    assert_eq!(p.render(), "[0]: <soft:1> , what is [0] ? 1. a 2. b 3. c 4. d");
}

#[test]
fn vqa_uses_no_point_tokens_and_the_template() {
    let (model, store) = setup();
    for image in store.iter().take(10) {
        let a = vqa_answer(&model, image, "what color is the circle").unwrap();
        assert_eq!(a.point_tokens, 0);
        assert!(
            a.prompt.contains("Question: what color is the circle Answer:"),
            "{}",
            a.prompt
        );
        let empty = vqa_answer(&model, image, "").unwrap();
        assert!(empty.prompt.ends_with("Question:  Answer:"));
    }
}

#[test]
fn dialogue_turns_extend_history_by_two() {
    let (model, store) = setup();
    let image = store.iter().find(|i| i.objects.len() >= 2).unwrap();
    let ds_scribble = |k: usize| {
        let obj = &image.objects[k];
        pointprompt::data::synthetic::object_scribble(obj, image.grid, 16, &mut ChaCha8Rng::seed_from_u64(k as u64))
    };
    let s0 = ds_scribble(0);
    let r1 = dialogue_step(&model, image, &DialogueState::default(), "", Some(&s0), 3).unwrap();
    assert_eq!(r1.state.turns.len(), 2);
    assert!(!r1.truncated);

    // A first turn with no text is exactly region captioning.
    let cap = caption_region(&model, image, &s0, &mut turn_rng(3, &image.image_id, 0)).unwrap();
    assert_eq!(r1.text, cap);

    let s1 = ds_scribble(1);
    let r2 = dialogue_step(&model, image, &r1.state, "and this ?", Some(&s1), 3).unwrap();
    assert_eq!(r2.state.turns.len(), 4);
    assert_eq!(&r2.state.turns[..2], &r1.state.turns[..]);
    assert_eq!(r2.state.turns[2].role, Role::User);
    assert_eq!(r2.state.turns[3].role, Role::Model);
    assert_eq!(r2.prompt.matches("<soft:").count(), 2);
    let again = dialogue_step(&model, image, &r1.state, "and this ?", Some(&s1), 3).unwrap();
    assert_eq!(again, r2);
}

#[test]
fn long_dialogue_drops_oldest_exchanges() {
    let (model, store) = setup();
    let image = store.iter().next().unwrap();
    let scribble = pointprompt::data::synthetic::object_scribble(
        &image.objects[0],
        image.grid,
        4,
        &mut ChaCha8Rng::seed_from_u64(1),
    );
    let mut state = DialogueState::default();
    let mut truncated = false;
    for i in 0..12 {
        let reply = dialogue_step(
            &model,
            image,
            &state,
            "tell me more about this part please",
            Some(&scribble),
            i,
        )
        .unwrap();
        truncated |= reply.truncated;
        state = reply.state;
    }
    assert_eq!(state.turns.len(), 24);
    assert!(truncated, "a 128-row context cannot hold twelve scribbled exchanges");
}
