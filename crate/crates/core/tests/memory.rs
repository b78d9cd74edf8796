use mla_core::attention::AttentionConfig;
use mla_core::conversion::Placement;
use mla_core::memory::{
    footprint, reduction_ratio, sweep, with_placement, CacheFootprint, ReductionBasis, SweepConfig,
    SweepModel, SweepRow, DEFAULT_BYTES_PER_ENTRY, SWEEP_BATCHES, SWEEP_LENGTHS,
};
use mla_core::model::{ModelSpec, Site};

fn pct(basis: ReductionBasis, d: usize, l: usize, p: usize) -> String {
    reduction_ratio(basis, d, l, p).unwrap().to_string()
}

#[test]
fn published_reduction_figures() {
    assert_eq!(pct(ReductionBasis::KeyOnly, 768, 96, 0), "87.50%");
    assert_eq!(pct(ReductionBasis::KeyOnly, 768, 96, 48), "81.25%");
}

#[test]
fn key_value_basis_figures() {
    assert_eq!(pct(ReductionBasis::KeyValue, 768, 96, 0), "93.75%");
    assert_eq!(pct(ReductionBasis::KeyValue, 768, 96, 48), "90.625%");
    assert_eq!(pct(ReductionBasis::KeyOnly, 64, 8, 8), "75.00%");
    assert_eq!(pct(ReductionBasis::KeyValue, 64, 8, 8), "87.50%");
}

#[test]
fn non_compressions_are_rejected() {
    assert!(reduction_ratio(ReductionBasis::KeyOnly, 768, 700, 96).is_err());
    assert!(reduction_ratio(ReductionBasis::KeyValue, 768, 1500, 48).is_err());
    assert!(reduction_ratio(ReductionBasis::KeyOnly, 0, 0, 0).is_err());
}

fn whisper_mla(placement: Placement) -> ModelSpec {
    with_placement(&ModelSpec::whisper_small(), placement, AttentionConfig::whisper_small_mla()).unwrap()
}

#[test]
fn footprint_is_linear_per_argument() {
    for spec in [ModelSpec::whisper_small(), whisper_mla(Placement::Dso), whisper_mla(Placement::Full)] {
        let f = |b, g, s| footprint(&spec, b, g, s, DEFAULT_BYTES_PER_ENTRY);
        assert_eq!(f(1, 0, 0).total, 0);
        assert_eq!(f(3, 0, 100).decoder_self, 0);
        assert_eq!(f(2, 100, 50).total, 2 * f(1, 100, 50).total);
        assert_eq!(f(1, 200, 50).decoder_self, 2 * f(1, 100, 50).decoder_self);
        assert_eq!(f(1, 200, 50).cross, f(1, 100, 50).cross);
        assert_eq!(f(1, 100, 80).cross, 2 * f(1, 100, 40).cross);
        assert_eq!(f(1, 100, 80).encoder_self, 2 * f(1, 100, 40).encoder_self);
        let b = f(4, 37, 11);
        assert_eq!(b.total, b.decoder_self + b.cross + b.encoder_self);
    }
}

#[test]
fn toy_accounting() {
    let b = footprint(&ModelSpec::toy(), 1, 100, 0, 1);
    assert_eq!(b.decoder_self, 25_600);
    let fp = CacheFootprint::new(&ModelSpec::toy(), 2);
    assert!(fp.site(Site::DecoderSelf).growing);
    assert!(!fp.site(Site::EncoderSelf).growing);
    assert!(!fp.site(Site::Cross).growing);
    assert_eq!(fp.site(Site::Cross).entries_per_token_per_layer, 128);
}

#[test]
fn placements_share_the_growing_cache() {
    let (dso, full, mha) = (whisper_mla(Placement::Dso), whisper_mla(Placement::Full), ModelSpec::whisper_small());
    for (b, g, s) in [(1, 256, 1500), (16, 4096, 1500), (64, 2048, 0)] {
        let d = footprint(&dso, b, g, s, 2);
        let f = footprint(&full, b, g, s, 2);
        let m = footprint(&mha, b, g, s, 2);
        assert_eq!(d.decoder_self, f.decoder_self);
        assert_eq!((d.cross, d.encoder_self), (m.cross, m.encoder_self));
        assert!(f.cross < d.cross && f.encoder_self < d.encoder_self || s == 0);
        assert_eq!(d.decoder_self * 768 * 2, m.decoder_self * 144);
    }
}

fn grid(budget: Option<u64>) -> Vec<SweepRow> {
    let models = [
        SweepModel { name: "mha".into(), placement: "none".into(), spec: ModelSpec::whisper_small() },
        SweepModel { name: "mla".into(), placement: "full".into(), spec: whisper_mla(Placement::Full) },
    ];
    let cfg = SweepConfig {
        batches: SWEEP_BATCHES.to_vec(),
        lengths: SWEEP_LENGTHS.to_vec(),
        source_len: 1500,
        bytes_per_entry: 2,
        budget_bytes: budget,
    };
    sweep(&models, &cfg).unwrap()
}

#[test]
fn sweep_orderings_and_oom_crossover() {
    let rows = grid(None);
    assert_eq!(rows.len(), 2 * 4 * 5);
    let (mha, mla) = rows.split_at(20);
    for (a, b) in mha.iter().zip(mla) {
        assert_eq!((a.batch, a.seq_len), (b.batch, b.seq_len));
        assert!(b.bytes_total <= a.bytes_total);
        assert!(!a.oom && !b.oom);
    }
    for side in [mha, mla] {
        for (i, r) in side.iter().enumerate() {
            if i % 5 != 0 {
                assert!(r.bytes_total >= side[i - 1].bytes_total);
            }
            if i >= 5 {
                assert!(r.bytes_total >= side[i - 5].bytes_total);
            }
        }
    }
    let at = |rows: &[SweepRow]| rows.iter().find(|r| r.batch == 64 && r.seq_len == 2048).unwrap().bytes_total;
    let budget = (at(mha) + at(mla)) / 2;
    let flagged = grid(Some(budget));
    let hit: Vec<_> = flagged
        .iter()
        .filter(|r| r.batch == 64 && r.seq_len == 2048 && r.oom)
        .map(|r| r.model.as_str())
        .collect();
    assert_eq!(hit, ["mha"]);
}

#[test]
fn gap_widens_with_length() {
    let rows = grid(None);
    let (mha, mla) = rows.split_at(20);
    for b in 0..4 {
        let ratios: Vec<f64> = (0..5)
            .map(|l| mla[b * 5 + l].bytes_total as f64 / mha[b * 5 + l].bytes_total as f64)
            .collect();
        assert!(ratios.windows(2).all(|w| w[1] <= w[0]), "{ratios:?}");
    }
}

#[test]
fn csv_layout() {
    assert_eq!(
        SweepRow::CSV_HEADER,
        "model,placement,batch,seq_len,source_len,bytes_total,bytes_decoder_self,bytes_cross,bytes_encoder_self,oom"
    );
    let row = &grid(Some(1))[0];
    let line = row.to_csv();
    assert_eq!(line.split(',').count(), 10);
    assert!(line.starts_with("mha,none,1,256,1500,"));
    assert!(line.ends_with(",true"));
    assert!(sweep(&[], &SweepConfig { batches: vec![1], lengths: vec![1], source_len: 0, bytes_per_entry: 2, budget_bytes: None }).is_err());
}
