use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("program state cannot be restored from this snapshot")]
pub struct NotSnapshotable;

/// Program state that `fork` copies into the child.
///
/// The child starts from the program entry with the snapshot available, and
/// resumes at the recorded point after restoring it.
pub trait HeapImage: Sized {
    fn snapshot(&self) -> Vec<u8>;
    fn restore(bytes: &[u8]) -> Result<Self, NotSnapshotable>;
}

impl HeapImage for Vec<u8> {
    fn snapshot(&self) -> Vec<u8> {
        self.clone()
    }

    fn restore(bytes: &[u8]) -> Result<Self, NotSnapshotable> {
        Ok(bytes.to_vec())
    }
}

impl HeapImage for String {
    fn snapshot(&self) -> Vec<u8> {
        self.as_bytes().to_vec()
    }

    fn restore(bytes: &[u8]) -> Result<Self, NotSnapshotable> {
        String::from_utf8(bytes.to_vec()).map_err(|_| NotSnapshotable)
    }
}
