use lip2speech::data::corpus::{formants, mouth_opening, mouth_width, token_name};
use lip2speech::data::disk::{read_corpus, write_corpus};
use lip2speech::data::{
    detect, generate_corpus, generate_corpus_with, split_indices, yld_segment, CorpusConfig, Identity, TemplateMatcher,
};
use lip2speech::dsp::{wav_to_mel, AudioConfig};
use lip2speech::metrics::TokenClassifier;
use proptest::prelude::*;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn corpus_is_deterministic_under_seed() {
    let a = generate_corpus(2, 2, 6, 11).unwrap();
    let b = generate_corpus(2, 2, 6, 11).unwrap();
    assert_eq!(a, b);
    let c = generate_corpus(2, 2, 6, 12).unwrap();
    assert_ne!(a[0].audio, c[0].audio);
}

#[test]
fn corpus_rejects_tiny_vocabulary() {
    assert!(generate_corpus(1, 1, 1, 0).is_err());
}

#[test]
fn identities_differ_by_configured_f0_spacing() {
    let cfg = CorpusConfig::default();
    for i in 0..5 {
        let d = Identity::new(i + 1, &cfg).voice.f0_hz - Identity::new(i, &cfg).voice.f0_hz;
        assert!((d - cfg.f0_spacing_hz).abs() < 1e-9);
        assert!(d >= 30.0);
    }
}

#[test]
fn audio_duration_matches_video() {
    let cfg = CorpusConfig::default();
    for s in generate_corpus(2, 3, 12, 5).unwrap() {
        let hop = 200.0 / cfg.sample_rate_hz as f64;
        assert!((s.audio.duration_s() - s.duration_s()).abs() <= hop);
        assert!(!s.tokens.is_empty());
        assert!(s.frames.iter().all(|f| f.in_unit_range() && f.width == 64 && f.channels == 3));
        assert!(s.audio.peak() <= 1.0);
    }
}

#[test]
fn mouth_area_tracks_audio_loudness() {
    let corpus = generate_corpus(3, 3, 12, 3).unwrap();
    let mut area = Vec::new();
    let mut rms = Vec::new();
    for s in &corpus {
        let spf = s.audio.sample_rate_hz as usize / s.fps as usize;
        for (n, f) in s.frames.iter().enumerate() {
            // mouth pixels are the only strongly red-dominant ones
            let a = f.data.chunks(3).filter(|p| p[0] > 0.4 && p[0] - p[1] > 0.3 && p[0] - p[2] > 0.3 && p[1] < 0.1).count();
            area.push(a as f64);
            let seg = &s.audio.samples[n * spf..(n + 1) * spf];
            rms.push((seg.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / spf as f64).sqrt());
        }
    }
    let r = pearson(&area, &rms);
    assert!(r > 0.7, "r = {r}");
}

#[test]
fn tokens_have_distinct_lip_and_formant_signatures() {
    for a in 0..12 {
        for b in (a + 1)..12 {
            assert_ne!(formants(a), formants(b), "{a} {b}");
            let differs = (mouth_width(a) - mouth_width(b)).abs() > 0.1
                || (0..50).any(|i| {
                    let u = i as f64 / 49.0;
                    (mouth_opening(a, u) - mouth_opening(b, u)).abs() > 0.05
                });
            assert!(differs, "lip trajectories of {a} and {b}");
        }
    }
    assert_eq!(token_name(0), "ba");
}

#[test]
fn classifier_recognises_clean_held_out_speech() {
    let cfg = CorpusConfig {
        n_identities: 4,
        samples_per_identity: 8,
        seed: 21,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus_with(&cfg).unwrap();
    let audio = AudioConfig::default();
    let mels: Vec<_> = corpus.iter().map(|s| wav_to_mel(&s.audio, &audio).unwrap()).collect();
    let (train, held) = split_indices(corpus.len(), 0.25, 1);
    let examples: Vec<_> = train.iter().map(|&i| (&mels[i], &corpus[i].tokens[..])).collect();
    let clf = TokenClassifier::fit(&examples).unwrap();
    let mut errors = 0.0;
    for &i in &held {
        errors += lip2speech::metrics::wer(&corpus[i].tokens, &clf.classify(&mels[i])).unwrap();
    }
    let w = errors / held.len() as f64;
    eprintln!("clean WER {w}");
    assert!(w < 0.1, "clean WER {w}");
}

#[test]
fn template_matcher_detects_only_the_target() {
    let corpus = generate_corpus(2, 1, 12, 4).unwrap();
    let (a, b) = (&corpus[0], &corpus[1]);
    let mut frames = a.frames.clone();
    frames.extend(b.frames.iter().cloned());
    let hits = detect(&TemplateMatcher::default(), &frames, &a.face);
    assert!(hits[..a.frames.len()].iter().all(|&h| h));
    assert!(hits[a.frames.len()..].iter().all(|&h| !h));
    let segs = yld_segment(&hits, a.fps as f64).unwrap();
    assert_eq!(segs.len(), 1);
    assert_eq!(segs[0].frame_range, [0, a.frames.len()]);
}

#[test]
fn corpus_survives_disk_round_trip() {
    let corpus = generate_corpus(1, 2, 12, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &corpus).unwrap();
    let back = read_corpus(dir.path()).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in corpus.iter().zip(&back) {
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.frames.len(), b.frames.len());
        assert_eq!(b.frames[0].channels, 1);
        assert!(a.audio.samples.iter().zip(&b.audio.samples).all(|(x, y)| (x - y).abs() <= 1.0 / 32768.0));
        assert!(a.face.data.iter().zip(&b.face.data).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
    }
}

#[test]
fn split_is_deterministic_and_disjoint() {
    let (t1, v1) = split_indices(20, 0.1, 3);
    let (t2, v2) = split_indices(20, 0.1, 3);
    assert_eq!((&t1, &v1), (&t2, &v2));
    assert_eq!(v1.len(), 2);
    assert!(t1.iter().all(|i| !v1.contains(i)));
    assert_eq!(t1.len() + v1.len(), 20);
    assert_eq!(split_indices(1, 0.1, 3), (vec![0], vec![]));
}

proptest! {
    #[test]
    fn segments_respect_bounds(dets in proptest::collection::vec(any::<bool>(), 0..400), fps in prop_oneof![Just(25.0), Just(30.0), Just(12.5)]) {
        let segs = yld_segment(&dets, fps).unwrap();
        let mut last_end = 0;
        for s in &segs {
            prop_assert!(s.duration_s() >= 1.0 - 1e-9 && s.duration_s() <= 3.0 + 1e-9);
            prop_assert!(s.frame_range[0] >= last_end);
            prop_assert!(s.frame_range[1] > s.frame_range[0]);
            prop_assert!(dets[s.frame_range[0]..s.frame_range[1]].iter().all(|&d| d));
            last_end = s.frame_range[1];
        }
    }

    #[test]
    fn resegmenting_a_whole_clip_returns_it(len in 25usize..=75) {
        let segs = yld_segment(&vec![true; len], 25.0).unwrap();
        prop_assert_eq!(segs.len(), 1);
        prop_assert_eq!(segs[0].frame_range, [0, len]);
    }
}
