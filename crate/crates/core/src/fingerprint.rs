use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 over a sequence of byte chunks.
///
/// Each chunk is length-prefixed so that `["ab", "c"]` and `["a", "bc"]`
/// hash differently.
pub(crate) fn digest_chunks<'a, I>(chunks: I) -> String
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut hasher = Sha256::new();
    for chunk in chunks {
        hasher.update((chunk.len() as u64).to_le_bytes());
        hasher.update(chunk);
    }
    hex::encode(hasher.finalize())
}

pub(crate) fn digest_json(value: &serde_json::Value) -> String {
    // serde_json maps are ordered (BTreeMap) so this is canonical.
    let bytes = serde_json::to_vec(value).expect("json values always serialize");
    digest_chunks([bytes.as_slice()])
}
