mod common;

use common::header;
use headsteer_core::trace::{read_trace, read_trace_all, validate_trace, write_trace, StepRecord, Trace, TraceError, PREAMBLE_LEN};
use proptest::prelude::*;

fn trace_strategy() -> impl Strategy<Value = Trace> {
    (1u16..4, 1u16..4, 1u32..6, 0usize..7).prop_flat_map(|(l, h, d, n)| {
        let values = l as usize * h as usize * d as usize;
        let record = (any::<u32>(), any::<u32>(), 0u8..2, prop::collection::vec(any::<u32>(), values)).prop_map(
            |(prompt_id, step_index, label, bits)| StepRecord {
                prompt_id,
                step_index,
                label,
                activations: bits.into_iter().map(f32::from_bits).collect(),
            },
        );
        (prop::collection::vec(record, n), "[a-z0-9/_.-]{0,20}").prop_map(move |(records, model)| {
            let mut hdr = header(l, h, d, 3, records.len() as u64);
            hdr.model_id = model;
            Trace::new(hdr, records)
        })
    })
}

fn bits(t: &Trace) -> Vec<(u32, u32, u8, Vec<u32>)> {
    t.records
        .iter()
        .map(|r| (r.prompt_id, r.step_index, r.label, r.activations.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn round_trip_is_bitwise(trace in trace_strategy()) {
        let bytes = trace.to_bytes().unwrap();
        let back = read_trace_all(&bytes[..]).unwrap();
        prop_assert_eq!(&back.header, &trace.header);
        prop_assert_eq!(bits(&back), bits(&trace));
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_size_formula_is_exact(trace in trace_strategy()) {
        let h = &trace.header;
        let header_block = serde_json::to_vec(h).unwrap().len() as u64;
        let expected = 10 + header_block
            + h.num_steps * (9 + 4 * h.num_layers as u64 * h.num_heads as u64 * h.head_dim as u64);
        let mut sink = Vec::new();
        let written = write_trace(h, &trace.records, &mut sink).unwrap();
        prop_assert_eq!(written, expected);
        prop_assert_eq!(sink.len() as u64, expected);
        prop_assert_eq!(trace.encoded_len(), expected);
        prop_assert_eq!(PREAMBLE_LEN, 10);
    }

    #[test]
    fn every_truncation_errors(trace in trace_strategy(), cut in any::<prop::sample::Index>()) {
        let bytes = trace.to_bytes().unwrap();
        let at = cut.index(bytes.len());
        prop_assert!(read_trace_all(&bytes[..at]).is_err());
    }

    #[test]
    fn streaming_reader_preserves_write_order(trace in trace_strategy()) {
        let bytes = trace.to_bytes().unwrap();
        let (hdr, records) = read_trace(&bytes[..]).unwrap();
        prop_assert_eq!(&hdr, &trace.header);
        let ids: Vec<(u32, u32)> = records.map(|r| r.map(|r| (r.prompt_id, r.step_index))).collect::<Result<_, _>>().unwrap();
        let want: Vec<(u32, u32)> = trace.records.iter().map(|r| (r.prompt_id, r.step_index)).collect();
        prop_assert_eq!(ids, want);
    }
}

#[test]
fn truncation_reports_an_offset_for_every_cut() {
    let mut records = Vec::new();
    for i in 0..3 {
        records.push(StepRecord { prompt_id: 0, step_index: i, label: (i % 2) as u8, activations: vec![i as f32; 8] });
    }
    let trace = Trace::new(header(2, 2, 2, 1, 3), records);
    let bytes = trace.to_bytes().unwrap();
    for cut in 0..bytes.len() {
        match read_trace_all(&bytes[..cut]) {
            Err(TraceError::Corrupt { offset, .. }) => assert!(offset <= cut as u64, "cut {cut} offset {offset}"),
            Err(TraceError::UnsupportedFormat(_)) if (cut as u64) < PREAMBLE_LEN => {}
            other => panic!("cut {cut}: {other:?}"),
        }
    }
}

#[test]
fn written_traces_validate() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    for _ in 0..20 {
        let t = common::random_trace(&mut rng, 6);
        let report = validate_trace(&t.header, &t.records, false);
        assert_eq!(report.errors().count(), 0, "{:?}", report.violations);
    }
}
