//! Fixed-grid token representation.
//!
//! Every track is a sequence of categorical tokens on a 16th-note grid. Pitched
//! tracks (melody, bass) use a 90-token vocabulary: 88 piano pitches in ascending
//! order, then note-off and hold. The drum track packs nine drum groups into a
//! 9-bit onset mask. In diffusion contexts each track additionally admits its
//! absorbing mask token, whose id equals the vocabulary size.

use std::io::{Read, Write};

use thiserror::Error;

pub const STEPS_PER_BAR: usize = 16;

/// Vocabulary of monophonic pitched tracks.
pub struct PitchVocab;

impl PitchVocab {
    pub const PITCH_LO: u8 = 21;
    pub const PITCH_HI: u8 = 108;
    pub const NOTE_OFF: u16 = 88;
    pub const HOLD: u16 = 89;
    pub const SIZE: u16 = 90;
    pub const MASK: u16 = 90;

    /// Token for a MIDI pitch, if it lies on the piano range.
    pub fn pitch_token(pitch: u8) -> Option<u16> {
        (Self::PITCH_LO..=Self::PITCH_HI)
            .contains(&pitch)
            .then(|| u16::from(pitch - Self::PITCH_LO))
    }

    pub fn token_pitch(token: u16) -> Option<u8> {
        (token < Self::NOTE_OFF).then(|| Self::PITCH_LO + token as u8)
    }

    pub fn is_onset(token: u16) -> bool {
        token < Self::NOTE_OFF
    }
}

/// Drum onset masks. Bit `i` is set when any note of group `i` starts on the step.
pub struct DrumVocab;

impl DrumVocab {
    pub const SIZE: u16 = 512;
    pub const MASK: u16 = 512;
    /// kick, snare, closed hi-hat, open hi-hat, low tom, mid tom, high tom, crash, ride
    pub const GROUPS: [&'static [u8]; 9] = [
        &[35, 36],
        &[38, 40],
        &[42, 44],
        &[46],
        &[41, 43, 45],
        &[47, 48],
        &[50],
        &[49, 57],
        &[51, 59],
    ];
    /// Note written for each group on export.
    pub const EXPORT_NOTES: [u8; 9] = [36, 38, 42, 46, 45, 48, 50, 49, 51];

    pub fn group_of(note: u8) -> Option<usize> {
        Self::GROUPS.iter().position(|g| g.contains(&note))
    }
}

/// Semantics of one track of a [`TokenSequence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum TrackKind {
    Pitch,
    Drums,
    /// A bare categorical alphabet of the given size; used for small synthetic problems.
    Categorical(u16),
}

impl TrackKind {
    pub fn vocab_size(self) -> u16 {
        match self {
            TrackKind::Pitch => PitchVocab::SIZE,
            TrackKind::Drums => DrumVocab::SIZE,
            TrackKind::Categorical(k) => k,
        }
    }

    pub fn mask_id(self) -> u16 {
        self.vocab_size()
    }
}

/// Track layout of a piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Melody,
    Trio,
}

impl Layout {
    pub fn kinds(self) -> Vec<TrackKind> {
        match self {
            Layout::Melody => vec![TrackKind::Pitch],
            Layout::Trio => vec![TrackKind::Pitch, TrackKind::Pitch, TrackKind::Drums],
        }
    }

    pub fn tracks(self) -> usize {
        match self {
            Layout::Melody => 1,
            Layout::Trio => 3,
        }
    }

    pub fn from_tracks(tracks: usize) -> Option<Layout> {
        match tracks {
            1 => Some(Layout::Melody),
            3 => Some(Layout::Trio),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TokenError {
    #[error("steps ({steps}) must be a positive multiple of steps_per_bar ({steps_per_bar})")]
    BadLength { steps: usize, steps_per_bar: usize },
    #[error("token {value} at step {step}, track {track} exceeds vocabulary size {limit}")]
    OutOfVocab {
        step: usize,
        track: usize,
        value: u16,
        limit: u16,
    },
    #[error("value count {got} does not match {steps} steps x {tracks} tracks")]
    ShapeMismatch {
        got: usize,
        steps: usize,
        tracks: usize,
    },
    #[error("token file: {0}")]
    Format(String),
    #[error("token file io: {0}")]
    Io(String),
}

/// A grid of `steps x tracks` token indices, stored step-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    kinds: Vec<TrackKind>,
    steps: usize,
    steps_per_bar: usize,
    values: Vec<u16>,
}

impl TokenSequence {
    /// Builds a sequence, allowing mask ids.
    pub fn from_values(
        kinds: Vec<TrackKind>,
        steps: usize,
        steps_per_bar: usize,
        values: Vec<u16>,
    ) -> Result<Self, TokenError> {
        if steps == 0 || steps_per_bar == 0 || !steps.is_multiple_of(steps_per_bar) {
            return Err(TokenError::BadLength {
                steps,
                steps_per_bar,
            });
        }
        if values.len() != steps * kinds.len() {
            return Err(TokenError::ShapeMismatch {
                got: values.len(),
                steps,
                tracks: kinds.len(),
            });
        }
        for (i, &v) in values.iter().enumerate() {
            let track = i % kinds.len();
            let limit = kinds[track].mask_id();
            if v > limit {
                return Err(TokenError::OutOfVocab {
                    step: i / kinds.len(),
                    track,
                    value: v,
                    limit,
                });
            }
        }
        Ok(Self {
            kinds,
            steps,
            steps_per_bar,
            values,
        })
    }

    /// Explicit silence on every track: note-off then holds, empty drum steps.
    pub fn silence(layout: Layout, steps: usize) -> Self {
        let kinds = layout.kinds();
        let mut values = Vec::with_capacity(steps * kinds.len());
        for s in 0..steps {
            for k in &kinds {
                values.push(match k {
                    TrackKind::Pitch if s == 0 => PitchVocab::NOTE_OFF,
                    TrackKind::Pitch => PitchVocab::HOLD,
                    _ => 0,
                });
            }
        }
        Self {
            kinds,
            steps,
            steps_per_bar: STEPS_PER_BAR,
            values,
        }
    }

    /// Every position set to its track's mask id.
    pub fn all_masked(kinds: Vec<TrackKind>, steps: usize, steps_per_bar: usize) -> Self {
        let values = (0..steps)
            .flat_map(|_| kinds.iter().map(|k| k.mask_id()))
            .collect();
        Self {
            kinds,
            steps,
            steps_per_bar,
            values,
        }
    }

    pub fn kinds(&self) -> &[TrackKind] {
        &self.kinds
    }

    pub fn layout(&self) -> Option<Layout> {
        [Layout::Melody, Layout::Trio]
            .into_iter()
            .find(|l| l.kinds() == self.kinds)
    }

    pub fn tracks(&self) -> usize {
        self.kinds.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn steps_per_bar(&self) -> usize {
        self.steps_per_bar
    }

    pub fn bars(&self) -> usize {
        self.steps / self.steps_per_bar
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u16] {
        &self.values
    }

    #[inline]
    pub fn get(&self, step: usize, track: usize) -> u16 {
        self.values[step * self.kinds.len() + track]
    }

    #[inline]
    pub fn set(&mut self, step: usize, track: usize, value: u16) {
        debug_assert!(value <= self.kinds[track].mask_id());
        let n = self.kinds.len();
        self.values[step * n + track] = value;
    }

    pub fn track(&self, track: usize) -> impl Iterator<Item = u16> + '_ {
        self.values
            .iter()
            .skip(track)
            .step_by(self.kinds.len())
            .copied()
    }

    pub fn is_mask(&self, step: usize, track: usize) -> bool {
        self.get(step, track) == self.kinds[track].mask_id()
    }

    pub fn mask_count(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .filter(|(i, &v)| v == self.kinds[i % self.kinds.len()].mask_id())
            .count()
    }

    pub fn has_masks(&self) -> bool {
        self.mask_count() > 0
    }

    /// Same shape and track kinds.
    pub fn same_shape(&self, other: &TokenSequence) -> bool {
        self.kinds == other.kinds
            && self.steps == other.steps
            && self.steps_per_bar == other.steps_per_bar
    }

    /// Copy of steps `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<TokenSequence, TokenError> {
        let n = self.kinds.len();
        let values = self.values[start * n..(start + len) * n].to_vec();
        TokenSequence::from_values(self.kinds.clone(), len, self.steps_per_bar, values)
    }
}

const MAGIC: &[u8; 4] = b"UMTK";
const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

/// Encodes one sequence: 16-byte header (magic, version, tracks, steps,
/// steps_per_bar, reserved), then little-endian u16 tokens, step-major.
pub fn encode_sequence(seq: &TokenSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * seq.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.tracks() as u16).to_le_bytes());
    out.extend_from_slice(&(seq.steps as u32).to_le_bytes());
    out.extend_from_slice(&(seq.steps_per_bar as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in &seq.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a concatenation of encoded sequences (a corpus file).
pub fn decode_sequences(bytes: &[u8]) -> Result<Vec<TokenSequence>, TokenError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (seq, used) = decode_one(&bytes[pos..]).map_err(|e| match e {
            TokenError::Format(m) => TokenError::Format(format!("record at byte {pos}: {m}")),
            other => other,
        })?;
        out.push(seq);
        pos += used;
    }
    Ok(out)
}

fn decode_one(bytes: &[u8]) -> Result<(TokenSequence, usize), TokenError> {
    if bytes.len() < HEADER_LEN {
        return Err(TokenError::Format("truncated header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(TokenError::Format("bad magic".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let version = u16_at(4);
    if version != FORMAT_VERSION {
        return Err(TokenError::Format(format!("unsupported version {version}")));
    }
    let tracks = u16_at(6) as usize;
    let steps = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let steps_per_bar = u16_at(12) as usize;
    let layout = Layout::from_tracks(tracks)
        .ok_or_else(|| TokenError::Format(format!("unsupported track count {tracks}")))?;
    let n = steps
        .checked_mul(tracks)
        .ok_or_else(|| TokenError::Format("size overflow".into()))?;
    let end = HEADER_LEN + 2 * n;
    if bytes.len() < end {
        return Err(TokenError::Format(format!(
            "truncated body: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let values = bytes[HEADER_LEN..end]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let seq = TokenSequence::from_values(layout.kinds(), steps, steps_per_bar, values)?;
    Ok((seq, end))
}

pub fn write_sequences<W: Write>(mut w: W, seqs: &[TokenSequence]) -> Result<(), TokenError> {
    for s in seqs {
        w.write_all(&encode_sequence(s))
            .map_err(|e| TokenError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn read_sequences<R: Read>(mut r: R) -> Result<Vec<TokenSequence>, TokenError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| TokenError::Io(e.to_string()))?;
    decode_sequences(&buf)
}

pub fn save_sequences(
    path: impl AsRef<std::path::Path>,
    seqs: &[TokenSequence],
) -> Result<(), TokenError> {
    let f = std::fs::File::create(path).map_err(|e| TokenError::Io(e.to_string()))?;
    write_sequences(std::io::BufWriter::new(f), seqs)
}

pub fn load_sequences(path: impl AsRef<std::path::Path>) -> Result<Vec<TokenSequence>, TokenError> {
    let bytes = std::fs::read(path).map_err(|e| TokenError::Io(e.to_string()))?;
    decode_sequences(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_layout() {
        assert_eq!(
            (PitchVocab::PITCH_HI - PitchVocab::PITCH_LO + 1) as u16 + 2,
            PitchVocab::SIZE
        );
        assert_eq!(PitchVocab::MASK, PitchVocab::SIZE);
        assert_eq!(PitchVocab::pitch_token(60), Some(39));
        assert_eq!(PitchVocab::pitch_token(20), None);
        assert_eq!(PitchVocab::pitch_token(109), None);
        assert_eq!(DrumVocab::SIZE, 1 << DrumVocab::GROUPS.len());
        for (i, n) in DrumVocab::EXPORT_NOTES.iter().enumerate() {
            assert_eq!(DrumVocab::group_of(*n), Some(i));
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            TokenSequence::from_values(vec![TrackKind::Pitch], 15, 16, vec![0; 15]),
            Err(TokenError::BadLength { .. })
        ));
        assert!(matches!(
            TokenSequence::from_values(vec![TrackKind::Pitch], 16, 16, vec![91; 16]),
            Err(TokenError::OutOfVocab { value: 91, .. })
        ));
        // mask id itself is admissible
        assert!(TokenSequence::from_values(vec![TrackKind::Pitch], 16, 16, vec![90; 16]).is_ok());
    }

    #[test]
    fn header_is_sixteen_bytes() {
        let seq = TokenSequence::silence(Layout::Trio, 32);
        let bytes = encode_sequence(&seq);
        assert_eq!(bytes.len(), 16 + 2 * 32 * 3);
        assert_eq!(&bytes[..4], b"UMTK");
        // step 0: melody note-off, bass note-off, drums 0
        assert_eq!(&bytes[16..22], &[88, 0, 88, 0, 0, 0]);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let bytes = encode_sequence(&TokenSequence::silence(Layout::Melody, 16));
        let err = decode_sequences(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, TokenError::Format(_)));
        assert!(decode_sequences(&bytes[..10]).is_err());
    }

    fn arb_trio() -> impl Strategy<Value = TokenSequence> {
        (1usize..4).prop_flat_map(|bars| {
            let steps = bars * 16;
            proptest::collection::vec((0u16..91, 0u16..91, 0u16..513), steps).prop_map(
                move |cells| {
                    let values = cells.into_iter().flat_map(|(a, b, c)| [a, b, c]).collect();
                    TokenSequence::from_values(Layout::Trio.kinds(), steps, 16, values).unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn corpus_encoding_round_trips(seqs in proptest::collection::vec(arb_trio(), 1..4)) {
            let mut buf = Vec::new();
            write_sequences(&mut buf, &seqs).unwrap();
            prop_assert_eq!(read_sequences(&buf[..]).unwrap(), seqs);
        }
    }
}
