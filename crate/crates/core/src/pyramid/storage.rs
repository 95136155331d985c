use std::fs::OpenOptions;
use std::path::Path;
use std::sync::RwLock;

use memmap2::MmapMut;
use super::PyramidError;

pub(crate) enum LevelBuffer {
    Ram(Vec<u8>),
    Mapped(MmapMut),
}

impl LevelBuffer {
    fn bytes(&self) -> &[u8] {
        match self {
            LevelBuffer::Ram(v) => v,
            LevelBuffer::Mapped(m) => m,
        }
    }

    fn bytes_mut(&mut self) -> &mut [u8] {
        match self {
            LevelBuffer::Ram(v) => v,
            LevelBuffer::Mapped(m) => m,
        }
    }
}

/// Pixel storage of one writable level, row-major with interleaved channels.
pub(crate) struct LevelData {
    pub width: u32,
    pub channels: u8,
    buf: RwLock<LevelBuffer>,
}

impl LevelData {
    pub fn ram(width: u32, height: u32, channels: u8) -> Self {
        let len = width as usize * height as usize * channels as usize;
        Self { width, channels, buf: RwLock::new(LevelBuffer::Ram(vec![0; len])) }
    }

    pub fn mapped(
        level: u32,
        width: u32,
        height: u32,
        channels: u8,
        path: &Path,
    ) -> Result<Self, PyramidError> {
        let len = u64::from(width) * u64::from(height) * u64::from(channels);
        let create_err = |source: std::io::Error| PyramidError::Create { level, source };
        if let Some(dir) = path.parent() {
            if let Some(avail) = available_bytes(dir) {
                if avail < len {
                    return Err(create_err(std::io::Error::other(format!(
                        "insufficient disk space: need {len} bytes, {avail} available"
                    ))));
                }
            }
        }
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)
            .map_err(create_err)?;
        file.set_len(len).map_err(create_err)?;
        // SAFETY: the file is private to this pyramid's temp directory and is never resized
        // while mapped.
        let map = unsafe { MmapMut::map_mut(&file) }.map_err(create_err)?;
        Ok(Self { width, channels, buf: RwLock::new(LevelBuffer::Mapped(map)) })
    }

    pub fn is_mapped(&self) -> bool {
        matches!(*self.buf.read().unwrap(), LevelBuffer::Mapped(_))
    }

    fn row_stride(&self) -> usize {
        self.width as usize * self.channels as usize
    }

    /// Copies the region into `out`, which must hold `w * h * channels` bytes.
    pub fn read(&self, x: u32, y: u32, w: u32, h: u32, out: &mut [u8]) {
        let guard = self.buf.read().unwrap_or_else(|e| e.into_inner());
        let src = guard.bytes();
        let c = self.channels as usize;
        let stride = self.row_stride();
        let row_len = w as usize * c;
        for r in 0..h as usize {
            let s = (y as usize + r) * stride + x as usize * c;
            out[r * row_len..(r + 1) * row_len].copy_from_slice(&src[s..s + row_len]);
        }
    }

    pub fn write(&self, x: u32, y: u32, w: u32, h: u32, pixels: &[u8]) {
        let mut guard = self.buf.write().unwrap_or_else(|e| e.into_inner());
        let dst = guard.bytes_mut();
        let c = self.channels as usize;
        let stride = self.row_stride();
        let row_len = w as usize * c;
        for r in 0..h as usize {
            let d = (y as usize + r) * stride + x as usize * c;
            dst[d..d + row_len].copy_from_slice(&pixels[r * row_len..(r + 1) * row_len]);
        }
    }

    /// Runs `f` over the whole level buffer.
    pub fn with_bytes<R>(&self, f: impl FnOnce(&[u8]) -> R) -> R {
        let guard = self.buf.read().unwrap_or_else(|e| e.into_inner());
        f(guard.bytes())
    }

    pub fn with_bytes_mut<R>(&self, f: impl FnOnce(&mut [u8]) -> R) -> R {
        let mut guard = self.buf.write().unwrap_or_else(|e| e.into_inner());
        f(guard.bytes_mut())
    }
}

#[cfg(unix)]
fn available_bytes(dir: &Path) -> Option<u64> {
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;

    let c = CString::new(dir.as_os_str().as_bytes()).ok()?;
    let mut stat: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: `c` is a valid NUL-terminated path and `stat` a properly sized out-parameter.
    let rc = unsafe { libc::statvfs(c.as_ptr(), &mut stat) };
    if rc != 0 {
        return None;
    }
    Some(stat.f_bavail as u64 * stat.f_frsize as u64)
}

#[cfg(not(unix))]
fn available_bytes(_dir: &Path) -> Option<u64> {
    None
}
