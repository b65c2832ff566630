use super::*;

fn tiny(variant: BlockVariant) -> ModelConfig {
    ModelConfig {
        max_len: 12,
        seed: 7,
        ..ModelConfig::small(13, 8, 2, (2, 2), variant)
    }
}

fn perturbed(variant: BlockVariant) -> Seq2SeqModel<f64> {
    Seq2SeqModel::build_with(&tiny(variant), InitStyle::Perturbed).unwrap()
}

#[test]
fn builds_are_deterministic() {
    let a: Seq2SeqModel = Seq2SeqModel::build(&tiny(BlockVariant::Both)).unwrap();
    let b: Seq2SeqModel = Seq2SeqModel::build(&tiny(BlockVariant::Both)).unwrap();
    assert_eq!(a, b);
    let mut other = tiny(BlockVariant::Both);
    other.seed = 8;
    let c: Seq2SeqModel = Seq2SeqModel::build(&other).unwrap();
    assert_ne!(a.weights().embedding, c.weights().embedding);
}

#[test]
fn baseline_has_no_augmentation_parameters() {
    let m: Seq2SeqModel = Seq2SeqModel::build(&tiny(BlockVariant::Baseline)).unwrap();
    let names: Vec<_> = m.weights().named("").into_iter().map(|(n, _)| n).collect();
    assert!(names
        .iter()
        .all(|n| !n.contains("horizontal") && !n.contains("vertical")));
    let both: Seq2SeqModel = Seq2SeqModel::build(&tiny(BlockVariant::Both)).unwrap();
    let names: Vec<_> = both.weights().named("").into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with("horizontal.w_a1")).count(), 6);
    assert_eq!(names.iter().filter(|n| n.ends_with("vertical.w_u")).count(), 6);
    assert_eq!(names.first().unwrap(), "embedding");
    assert_eq!(names.last().unwrap(), "output");
}

#[test]
fn augmented_models_share_base_parameters() {
    let base: Seq2SeqModel = Seq2SeqModel::build(&tiny(BlockVariant::Baseline)).unwrap();
    let both: Seq2SeqModel = Seq2SeqModel::build(&tiny(BlockVariant::Both)).unwrap();
    let augmented: std::collections::HashMap<_, _> = both.weights().named("").into_iter().collect();
    for (name, t) in base.weights().named("") {
        assert_eq!(augmented[&name], t, "{name}");
    }
}

#[test]
fn default_block_attention_parameter_count() {
    let cfg = ModelConfig::default();
    assert_eq!(
        (cfg.d_model, cfg.num_heads, cfg.d_k, cfg.d_v, cfg.d_a),
        (512, 8, 64, 64, 128)
    );
    assert_eq!(
        (cfg.num_encoder_blocks, cfg.num_decoder_blocks, cfg.ffn_width),
        (6, 6, 2048)
    );
    let layout = ModelWeights::layout(&cfg);
    let mut n = 0;
    let attention = &layout.encoder[0].attention;
    for head in &attention.heads {
        head.visit("", &mut |_, s: &ParamSpec| n += s.numel());
    }
    n += attention.w_o.numel();
    assert_eq!(n, 786_432 + 262_144);
}

#[test]
fn logits_shape() {
    let m = perturbed(BlockVariant::Both);
    let logits = m.forward(&[3, 4, 5, 6], &[BOS, 7, 8]).unwrap();
    assert_eq!(logits.shape(), &[3, 13]);
    assert!(logits.is_finite());
}

#[test]
fn decoder_is_causal_for_every_variant() {
    for variant in BlockVariant::ALL {
        let m = perturbed(variant);
        let src = [3, 9, 4, 5];
        let tgt = [BOS, 6, 7, 8, 9, 10];
        let base = m.forward(&src, &tgt).unwrap();
        for j in 1..tgt.len() {
            let mut changed = tgt;
            changed[j] = 12;
            let after = m.forward(&src, &changed).unwrap();
            let v = 13;
            assert_eq!(&base.data()[..j * v], &after.data()[..j * v], "{variant} j={j}");
            assert_ne!(&base.data()[j * v..], &after.data()[j * v..], "{variant} j={j}");
        }
    }
}

#[test]
fn every_source_token_reaches_every_decoder_position() {
    for variant in BlockVariant::ALL {
        let m = perturbed(variant);
        let src = [3, 9, 4, 5];
        let tgt = [BOS, 6, 7];
        let base = m.forward(&src, &tgt).unwrap();
        for i in 0..src.len() {
            let mut changed = src;
            changed[i] = 11;
            let after = m.forward(&changed, &tgt).unwrap();
            for pos in 0..tgt.len() {
                let row = pos * 13..(pos + 1) * 13;
                assert_ne!(
                    &base.data()[row.clone()],
                    &after.data()[row],
                    "{variant} src {i} pos {pos}"
                );
            }
        }
    }
}

#[test]
fn padded_batches_match_single_sequences() {
    for variant in BlockVariant::ALL {
        let m = perturbed(variant);
        let src = vec![vec![3, 4, 5, 6, 7], vec![8, 9], vec![10, 11, 12]];
        let tgt = vec![vec![BOS, 3], vec![BOS, 4, 5, 6], vec![BOS]];
        let batch = m.forward_batch(&src, &tgt).unwrap();
        assert_eq!(batch.shape(), &[3, 4, 13]);
        for b in 0..3 {
            let single = m.forward(&src[b], &tgt[b]).unwrap();
            let rows = &batch.data()[b * 4 * 13..][..tgt[b].len() * 13];
            let diff = rows
                .iter()
                .zip(single.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-10, "{variant} sequence {b}: {diff}");
        }
    }
}

#[test]
fn zero_horizontal_model_equals_prescaled_baseline() {
    let mut hcfg = tiny(BlockVariant::Horizontal);
    hcfg.num_heads = 4;
    hcfg.d_k = 2;
    hcfg.d_v = 2;
    let bcfg = ModelConfig {
        variant: BlockVariant::Baseline,
        ..hcfg.clone()
    };
    let hor: Seq2SeqModel<f64> = Seq2SeqModel::build(&hcfg).unwrap();
    let mut base: Seq2SeqModel<f64> = Seq2SeqModel::build(&bcfg).unwrap();
    base.weights_mut().visit_mut("", &mut |name, t| {
        if name.ends_with("w_v") {
            *t = t.map(|v| v / 4.0);
        }
    });
    let src = [3, 4, 5, 9, 10];
    let tgt = [BOS, 5, 4, 3];
    assert_eq!(hor.forward(&src, &tgt).unwrap(), base.forward(&src, &tgt).unwrap());
}

#[test]
fn input_validation() {
    let m = perturbed(BlockVariant::Baseline);
    assert!(matches!(m.forward(&[3, 13], &[BOS]), Err(Error::Input(_))));
    assert!(matches!(m.forward(&[3; 13], &[BOS]), Err(Error::Input(_))));
    assert!(matches!(m.forward(&[], &[BOS]), Err(Error::Input(_))));
    assert!(matches!(m.forward(&[3], &[BOS; 13]), Err(Error::Input(_))));
}

#[test]
fn positional_encoding_values() {
    let pe: Tensor = positional_encoding(10, 8).unwrap();
    for i in 0..4 {
        assert_eq!(pe.get(&[0, 2 * i]).unwrap(), 0.0);
        assert_eq!(pe.get(&[0, 2 * i + 1]).unwrap(), 1.0);
    }
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!((pe.get(&[1, 0]).unwrap() - 1f64.sin()).abs() < 1e-15);
    assert!((pe.get(&[1, 0]).unwrap() - 0.84147).abs() < 1e-5);
    assert!((pe.get(&[3, 2]).unwrap() - (3.0 / 10000f64.powf(0.25)).sin()).abs() < 1e-15);
    assert!(matches!(positional_encoding::<f64>(4, 7), Err(Error::Config { .. })));
}

#[test]
fn greedy_decode_contract() {
    let m = perturbed(BlockVariant::Both);
    assert!(m.greedy_decode(&[3, 4], 0, BOS, EOS).unwrap().is_empty());
    let a = m.greedy_decode(&[3, 4, 5], 8, BOS, EOS).unwrap();
    let b = m.greedy_decode(&[3, 4, 5], 8, BOS, EOS).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 8 && !a.contains(&EOS));
    assert!(m.greedy_decode(&[3], 13, BOS, EOS).is_err());
    assert!(m.greedy_decode(&[3], 4, BOS, 13).is_err());
}

#[test]
fn greedy_decode_follows_argmax() {
    let m = perturbed(BlockVariant::Vertical);
    let src = [5, 6, 7];
    let out = m.greedy_decode(&src, 5, BOS, EOS).unwrap();
    let mut prefix = vec![BOS];
    for &tok in &out {
        let logits = m.forward(&src, &prefix).unwrap();
        let last = &logits.data()[(prefix.len() - 1) * 13..];
        assert_eq!(argmax(last), tok);
        prefix.push(tok);
    }
    if out.len() < 5 {
        let logits = m.forward(&src, &prefix).unwrap();
        assert_eq!(argmax(&logits.data()[(prefix.len() - 1) * 13..]), EOS);
    }
}

#[test]
fn batched_decode_matches_single() {
    let m = perturbed(BlockVariant::Horizontal);
    let srcs = vec![vec![3, 4, 5, 6], vec![7], vec![8, 9]];
    let batch = m.greedy_decode_batch(&srcs, 6, BOS, EOS).unwrap();
    for (s, out) in srcs.iter().zip(&batch) {
        assert_eq!(&m.greedy_decode(s, 6, BOS, EOS).unwrap(), out);
    }
}

#[test]
fn argmax_prefers_lowest_index() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0f32; 4]), 0);
}

#[test]
fn config_json_defaults_and_derived_widths() {
    let cfg: ModelConfig = serde_json::from_str(r#"{"d_model": 64, "num_heads": 4}"#).unwrap();
    assert_eq!((cfg.d_k, cfg.d_v, cfg.d_a, cfg.ffn_width), (16, 16, 16, 256));
    let cfg: ModelConfig = serde_json::from_str(r#"{"variant": "both", "d_a": 3}"#).unwrap();
    assert_eq!(cfg.variant, BlockVariant::Both);
    assert_eq!(cfg.d_a, 3);
    assert!(serde_json::from_str::<ModelConfig>(r#"{"d_modle": 64}"#).is_err());
    let echoed = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&echoed).unwrap(), cfg);
}

#[test]
fn config_validation_names_the_field() {
    let field = |cfg: ModelConfig| match cfg.validate() {
        Err(Error::Config { field, .. }) => field,
        other => panic!("expected a configuration error, got {other:?}"),
    };
    let base = tiny(BlockVariant::Baseline);
    assert_eq!(
        field(ModelConfig {
            vocab_size: 1,
            ..base.clone()
        }),
        "vocab_size"
    );
    assert_eq!(
        field(ModelConfig {
            d_model: 7,
            d_a: 1,
            ..base.clone()
        }),
        "d_model"
    );
    assert_eq!(
        field(ModelConfig {
            num_encoder_blocks: 0,
            num_decoder_blocks: 0,
            ..base.clone()
        }),
        "num_encoder_blocks"
    );
    assert_eq!(
        field(ModelConfig {
            max_len: 0,
            ..base.clone()
        }),
        "max_len"
    );
    assert_eq!(field(ModelConfig { num_heads: 0, ..base }), "num_heads");
}

#[test]
fn encoder_only_and_decoder_only_models_run() {
    for blocks in [(1, 0), (0, 1)] {
        let cfg = ModelConfig {
            max_len: 8,
            ..ModelConfig::small(9, 4, 2, blocks, BlockVariant::Both)
        };
        let m: Seq2SeqModel = Seq2SeqModel::build(&cfg).unwrap();
        assert_eq!(m.forward(&[3, 4], &[BOS, 5]).unwrap().shape(), &[2, 9]);
    }
}

#[test]
fn from_weights_rejects_mismatched_shapes() {
    let m = perturbed(BlockVariant::Baseline);
    let mut w = m.weights().clone();
    w.output = Tensor::zeros(vec![8, 12]).unwrap();
    assert!(matches!(
        Seq2SeqModel::from_weights(m.config().clone(), w),
        Err(Error::Shape(_))
    ));
    let other = perturbed(BlockVariant::Vertical);
    assert!(Seq2SeqModel::from_weights(m.config().clone(), other.weights().clone()).is_err());
}
