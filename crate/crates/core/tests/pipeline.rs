mod common;

use glyphstyle::backend::{DiffusionBackend, Prompt, ToyUnetBackend, ZeroEpsilonBackend};
use glyphstyle::config::RunConfig;
use glyphstyle::dump::{load_trajectory, DumpIndex};
use glyphstyle::inversion::invert;
use glyphstyle::pipeline::{run, stylize, MaskInput, RunManifest, StepRecord, StylizationRequest, MANIFEST_FILE};
use glyphstyle::tensor::Grid2;
use glyphstyle::textmask::{BinaryMask, ContrastTextDetector, MaskSource, Region};
use glyphstyle::Error;

fn request(steps: usize, mask: MaskInput) -> StylizationRequest {
    StylizationRequest {
        image: common::text_image(32, 32),
        mask,
        config: RunConfig {
            steps,
            prompt: "rusty metal".into(),
            ..RunConfig::default()
        },
    }
}

fn box_regions() -> MaskInput {
    MaskInput::Regions(vec![Region::Box([6.0, 12.0, 26.0, 20.0])], MaskSource::UserSupplied)
}

#[test]
fn observer_sees_every_step_and_the_first_step_keeps_the_inversion() {
    let backend = ToyUnetBackend::new(6).unwrap();
    let mut seen = Vec::new();
    let mut observer = |r: &StepRecord<'_>| {
        if r.index == 0 {
            assert!(r.step_mask.data().iter().all(|&v| v == 0.0));
            assert_eq!(r.output, r.inverted);
        }
        seen.push(r.timestep);
        Ok(())
    };
    run(&request(6, box_regions()), &backend, Some(&mut observer)).unwrap();
    assert_eq!(seen, backend.schedule().timesteps());
}

#[test]
fn observer_errors_abort_the_run() {
    let backend = ZeroEpsilonBackend::new(4).unwrap();
    let mut observer = |r: &StepRecord<'_>| if r.index == 2 { Err(Error::NoTextRegion) } else { Ok(()) };
    assert!(matches!(run(&request(4, box_regions()), &backend, Some(&mut observer)), Err(Error::NoTextRegion)));
}

#[test]
fn empty_mask_is_rejected() {
    let backend = ZeroEpsilonBackend::new(4).unwrap();
    let mask = BinaryMask::from_grid(&Grid2::filled(32, 32, 0.0), MaskSource::UserSupplied);
    assert!(matches!(run(&request(4, MaskInput::Mask(mask)), &backend, None), Err(Error::NoTextRegion)));
}

#[test]
fn mask_size_must_match_image() {
    let backend = ZeroEpsilonBackend::new(4).unwrap();
    let mask = BinaryMask::from_grid(&Grid2::filled(16, 32, 1.0), MaskSource::UserSupplied);
    assert!(matches!(run(&request(4, MaskInput::Mask(mask)), &backend, None), Err(Error::ShapeMismatch(_))));
}

#[test]
fn steps_must_match_the_backend_schedule() {
    let backend = ZeroEpsilonBackend::new(5).unwrap();
    assert!(matches!(
        run(&request(4, box_regions()), &backend, None),
        Err(Error::StepsMismatch { requested: 4, scheduled: 5 })
    ));
}

#[test]
fn detector_finds_the_word() {
    let backend = ZeroEpsilonBackend::new(3).unwrap();
    let r = run(&request(3, MaskInput::Detector(Box::new(ContrastTextDetector::default()))), &backend, None).unwrap();
    assert_eq!(r.mask.source, MaskSource::OcrBoxes);
    assert!(r.mask.grid.get(16, 16) > 0.5);
    assert_eq!(r.mask.grid.get(2, 2), 0.0);
}

#[test]
fn zero_epsilon_background_is_the_input() {
    let backend = ZeroEpsilonBackend::new(10).unwrap();
    let req = request(10, box_regions());
    let r = run(&req, &backend, None).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            if r.distance.grid.get(y, x) == 0.0 {
                assert_eq!(r.image.pixel(y, x), req.image.pixel(y, x));
            }
        }
    }
}

#[test]
fn stylize_writes_artifacts_dumps_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let backend = ToyUnetBackend::new(4).unwrap();
    let mut req = request(4, box_regions());
    req.config.out = dir.path().join("run");
    req.config.dump_latents = true;
    req.config.dump_packets = true;
    let (image, manifest) = stylize(&req, &backend, None).unwrap();

    let out = &req.config.out;
    assert_eq!(RunManifest::read(&out.join(MANIFEST_FILE)).unwrap(), manifest);
    assert!(manifest.missing_artifacts(out).is_empty());
    assert_eq!(manifest.mask_source, MaskSource::UserSupplied);
    assert_eq!(manifest.text_pixels, 20 * 8);
    assert_eq!(glyphstyle::io::read_image(&out.join("stylized.png")).unwrap().height(), image.height());

    let main = DumpIndex::read(&out.join("latents/main")).unwrap();
    assert_eq!(main.entries.len(), 4);
    let packets = DumpIndex::read(&out.join("packets")).unwrap();
    assert!(!packets.entries.is_empty());

    let timesteps = backend.schedule().timesteps().to_vec();
    let stored = load_trajectory(&out.join("latents/inversion"), &timesteps).unwrap();
    let fresh = invert(&req.image, &Prompt::Null, &backend, 4).unwrap();
    assert_eq!(stored.entries(), fresh.entries());
}

#[test]
fn failed_stylize_leaves_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let backend = ZeroEpsilonBackend::new(4).unwrap();
    let mask = BinaryMask::from_grid(&Grid2::filled(32, 32, 0.0), MaskSource::UserSupplied);
    let mut req = request(4, MaskInput::Mask(mask));
    req.config.out = dir.path().join("run");
    req.config.dump_latents = true;
    assert!(stylize(&req, &backend, None).is_err());
    assert!(!req.config.out.exists());
}
