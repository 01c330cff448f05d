use proptest::prelude::*;
use vqdiff::midi::{parse_midi, read_vlq, write_midi, write_vlq, DEFAULT_TEMPO};
use vqdiff_core::music::{from_pianoroll, to_pianoroll, Pianoroll};

fn roll_strategy() -> impl Strategy<Value = Pianoroll> {
    (1usize..48, proptest::collection::vec((0usize..128, 0usize..48), 0..60)).prop_map(|(frames, cells)| {
        let mut roll = Pianoroll::new(frames, 32.0).unwrap();
        for (p, f) in cells {
            roll.set(p, f % frames, true);
        }
        roll
    })
}

proptest! {
    #[test]
    fn vlq_round_trips(v in 0u32..0x1000_0000) {
        let mut buf = Vec::new();
        write_vlq(v, &mut buf);
        prop_assert!(buf.len() <= 4);
        prop_assert_eq!(read_vlq(&buf, 0).unwrap(), (v, buf.len()));
    }

    // 32 fps is exactly 30 ticks per frame at 480 ticks per quarter and 120 bpm.
    #[test]
    fn pianoroll_survives_midi(roll in roll_strategy()) {
        let bytes = write_midi(&from_pianoroll(&roll), roll.duration(), 480, DEFAULT_TEMPO).unwrap();
        let parsed = parse_midi(&bytes).unwrap();
        prop_assert!(parsed.warnings.is_empty());
        prop_assert!((parsed.length - roll.duration()).abs() < 1e-12);
        let back = to_pianoroll(&parsed.events, 32.0, roll.frames()).unwrap();
        prop_assert_eq!(back, roll);
    }

    #[test]
    fn parser_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = parse_midi(&bytes);
        let mut framed = b"MThd\0\0\0\x06\0\x01\0\x02\x01\xe0MTrk".to_vec();
        framed.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        framed.extend_from_slice(&bytes);
        let _ = parse_midi(&framed);
    }
}
