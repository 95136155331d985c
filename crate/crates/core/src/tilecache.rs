//! Byte-budgeted tile cache with a pinned lowest level and coarse-level fallback.
//!
//! Tiles live in a recency queue: a hit moves the tile to the back, a miss loads it, appends it
//! and evicts from the front until the resident bytes fit the budget again. All tiles of the
//! lowest-resolution level are loaded once at construction and never evicted; they do not count
//! against the budget. When a tile is not resident, [`TileCache::resolve_with_fallback`]
//! answers with a crop of the nearest resident coarser tile and queues the real tile for
//! loading.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use lru::LruCache;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pyramid::{ImagePyramid, PyramidError, Tile, TileKey};

pub const DEFAULT_CACHE_BUDGET: u64 = 256 << 20;

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache budget of {budget} bytes cannot hold one {tile_bytes}-byte tile")]
    BudgetTooSmall { budget: u64, tile_bytes: u64 },
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error("loading tile {key} failed: {message}")]
    Load { key: TileKey, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheBudget {
    pub max_bytes: u64,
}

impl Default for CacheBudget {
    fn default() -> Self {
        Self { max_bytes: DEFAULT_CACHE_BUDGET }
    }
}

/// What the viewer is looking at, in level-0 coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    pub center_x: f64,
    pub center_y: f64,
    /// Level-0 pixels spanned horizontally.
    pub view_width_l0: f64,
    pub out_width_px: u32,
    pub out_height_px: u32,
}

impl Viewport {
    /// Level-0 rectangle `[x0, x1) x [y0, y1)` clamped to the slide.
    pub fn level0_rect(&self, width: u32, height: u32) -> (f64, f64, f64, f64) {
        let vw = self.view_width_l0;
        let vh = vw * f64::from(self.out_height_px) / f64::from(self.out_width_px.max(1));
        let clamp = |v: f64, hi: u32| v.clamp(0.0, f64::from(hi));
        (
            clamp(self.center_x - vw / 2.0, width),
            clamp(self.center_y - vh / 2.0, height),
            clamp(self.center_x + vw / 2.0, width),
            clamp(self.center_y + vh / 2.0, height),
        )
    }
}

/// Coarsest level whose pixel density still meets the output's:
/// `clamp(floor(log2(view_width_l0 / out_width_px)), 0, level_count - 1)`.
pub fn select_level(v: &Viewport, level_count: u32) -> u32 {
    let ratio = v.view_width_l0 / f64::from(v.out_width_px.max(1));
    if !(ratio >= 1.0) {
        return 0;
    }
    let l = ratio.log2().floor();
    (l as u32).min(level_count.saturating_sub(1))
}

/// Tiles of the selected level intersecting the view, row-major.
pub fn tiles_for_viewport(pyramid: &ImagePyramid, v: &Viewport) -> Vec<TileKey> {
    let level = select_level(v, pyramid.level_count());
    let (x0, y0, x1, y1) = v.level0_rect(pyramid.width(), pyramid.height());
    let scale = f64::from(1u32 << level);
    let (lw, lh) = pyramid.level_dims(level).expect("selected level exists");
    let lx0 = (x0 / scale).floor() as u32;
    let ly0 = (y0 / scale).floor() as u32;
    let lx1 = ((x1 / scale).ceil() as u32).min(lw);
    let ly1 = ((y1 / scale).ceil() as u32).min(lh);
    if lx1 <= lx0 || ly1 <= ly0 {
        return Vec::new();
    }
    let ts = pyramid.tile_size();
    let mut keys = Vec::new();
    for row in ly0 / ts..=(ly1 - 1) / ts {
        for col in lx0 / ts..=(lx1 - 1) / ts {
            keys.push(TileKey::new(level, col, row));
        }
    }
    keys
}

/// A tile answered by [`TileCache::resolve_with_fallback`].
#[derive(Clone, Debug)]
pub struct Resolved {
    /// Pixels covering the requested tile's footprint at the requested tile's size.
    pub tile: Arc<Tile>,
    /// Level the pixels actually came from.
    pub actual_level: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub loads: u64,
    pub evictions: u64,
    pub resident_bytes: u64,
    pub resident_tiles: u64,
    pub pinned_bytes: u64,
}

type LoadCell = Arc<OnceLock<Result<Arc<Tile>, String>>>;

struct CacheState {
    queue: LruCache<TileKey, Arc<Tile>>,
    resident_bytes: u64,
    loading: HashMap<TileKey, LoadCell>,
    eviction_log: Option<Vec<TileKey>>,
}

pub struct TileCache {
    pyramid: Arc<ImagePyramid>,
    budget: u64,
    pinned_level: u32,
    pinned: HashMap<TileKey, Arc<Tile>>,
    pinned_bytes: u64,
    state: Mutex<CacheState>,
    scheduled: Mutex<(VecDeque<TileKey>, HashSet<TileKey>)>,
    hits: AtomicU64,
    misses: AtomicU64,
    loads: AtomicU64,
    evictions: AtomicU64,
}

impl std::fmt::Debug for TileCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TileCache").field("budget", &self.budget).field("stats", &self.stats()).finish()
    }
}

impl TileCache {
    /// Builds a cache and eagerly loads every tile of the lowest-resolution level.
    pub fn new(pyramid: Arc<ImagePyramid>, budget: CacheBudget) -> Result<Self, CacheError> {
        let tile_bytes = pyramid.tile_bytes();
        if budget.max_bytes < tile_bytes {
            return Err(CacheError::BudgetTooSmall { budget: budget.max_bytes, tile_bytes });
        }
        let pinned_level = pyramid.lowest_level();
        let (cols, rows) = pyramid.tile_grid(pinned_level).expect("lowest level exists");
        let keys: Vec<TileKey> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| TileKey::new(pinned_level, c, r)))
            .collect();
        let tiles: Vec<Tile> = keys.par_iter().map(|&k| pyramid.read_tile(k)).collect::<Result<_, _>>()?;
        let pinned_bytes = tiles.iter().map(Tile::byte_size).sum();
        let pinned = tiles.into_iter().map(|t| (t.key, Arc::new(t))).collect();
        Ok(Self {
            pyramid,
            budget: budget.max_bytes,
            pinned_level,
            pinned,
            pinned_bytes,
            state: Mutex::new(CacheState {
                queue: LruCache::unbounded(),
                resident_bytes: 0,
                loading: HashMap::new(),
                eviction_log: None,
            }),
            scheduled: Mutex::new((VecDeque::new(), HashSet::new())),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            loads: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        })
    }

    /// Records evicted keys in order; see [`TileCache::take_evictions`].
    pub fn with_eviction_log(self) -> Self {
        self.lock().eviction_log = Some(Vec::new());
        self
    }

    pub fn take_evictions(&self) -> Vec<TileKey> {
        self.lock().eviction_log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, CacheState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn pyramid(&self) -> &Arc<ImagePyramid> {
        &self.pyramid
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn pinned_level(&self) -> u32 {
        self.pinned_level
    }

    pub fn resident_bytes(&self) -> u64 {
        self.lock().resident_bytes
    }

    /// Queue contents from front (next eviction) to back.
    pub fn queue_keys(&self) -> Vec<TileKey> {
        let st = self.lock();
        let mut keys: Vec<TileKey> = st.queue.iter().map(|(k, _)| *k).collect();
        keys.reverse();
        keys
    }

    pub fn is_resident(&self, key: TileKey) -> bool {
        self.pinned.contains_key(&key) || self.lock().queue.contains(&key)
    }

    pub fn stats(&self) -> CacheStats {
        let st = self.lock();
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            loads: self.loads.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            resident_bytes: st.resident_bytes,
            resident_tiles: st.queue.len() as u64,
            pinned_bytes: self.pinned_bytes,
        }
    }

    fn lookup(&self, key: TileKey) -> Option<Arc<Tile>> {
        if let Some(t) = self.pinned.get(&key) {
            return Some(Arc::clone(t));
        }
        self.lock().queue.get(&key).cloned()
    }

    /// Returns the tile, loading it on a miss. Concurrent misses for one key share one load.
    pub fn get_tile(&self, key: TileKey) -> Result<Arc<Tile>, CacheError> {
        self.pyramid.tile_rect(key)?;
        if let Some(t) = self.pinned.get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(t));
        }
        let cell = {
            let mut st = self.lock();
            if let Some(t) = st.queue.get(&key) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(Arc::clone(t));
            }
            self.misses.fetch_add(1, Ordering::Relaxed);
            Arc::clone(st.loading.entry(key).or_default())
        };
        let result = cell
            .get_or_init(|| {
                self.loads.fetch_add(1, Ordering::Relaxed);
                self.pyramid.read_tile(key).map(Arc::new).map_err(|e| e.to_string())
            })
            .clone();
        let mut st = self.lock();
        let owner = st.loading.get(&key).is_some_and(|c| Arc::ptr_eq(c, &cell));
        if owner {
            st.loading.remove(&key);
            if let Ok(tile) = &result {
                self.insert(&mut st, key, Arc::clone(tile));
            }
        }
        result.map_err(|message| CacheError::Load { key, message })
    }

    fn insert(&self, st: &mut CacheState, key: TileKey, tile: Arc<Tile>) {
        if st.queue.contains(&key) {
            st.queue.promote(&key);
            return;
        }
        st.resident_bytes += tile.byte_size();
        st.queue.put(key, tile);
        while st.resident_bytes > self.budget {
            let Some((k, t)) = st.queue.pop_lru() else { break };
            st.resident_bytes -= t.byte_size();
            self.evictions.fetch_add(1, Ordering::Relaxed);
            if let Some(log) = st.eviction_log.as_mut() {
                log.push(k);
            }
        }
    }

    /// Returns the requested tile if resident, otherwise a crop of the nearest resident coarser
    /// tile (the pinned level guarantees one exists) and schedules the real tile for loading.
    pub fn resolve_with_fallback(&self, key: TileKey) -> Result<Resolved, CacheError> {
        let (x, y, w, h) = self.pyramid.tile_rect(key)?;
        if let Some(tile) = self.lookup(key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Resolved { tile, actual_level: key.level });
        }
        self.schedule(key);
        for level in key.level + 1..=self.pinned_level {
            let d = level - key.level;
            let akey = TileKey::new(level, key.col >> d, key.row >> d);
            if let Some(ancestor) = self.lookup(akey) {
                let c = ancestor.channels as usize;
                let ts = self.pyramid.tile_size();
                let (ax, ay) = (akey.col * ts, akey.row * ts);
                let mut pixels = Vec::with_capacity(w as usize * h as usize * c);
                for j in 0..h {
                    let sy = ((y + j) >> d) - ay;
                    for i in 0..w {
                        let sx = ((x + i) >> d) - ax;
                        let s = (sy as usize * ancestor.width as usize + sx as usize) * c;
                        pixels.extend_from_slice(&ancestor.pixels[s..s + c]);
                    }
                }
                let tile = Tile { key, width: w, height: h, channels: ancestor.channels, pixels };
                return Ok(Resolved { tile: Arc::new(tile), actual_level: level });
            }
        }
        unreachable!("lowest level is pinned")
    }

    fn schedule(&self, key: TileKey) {
        let mut s = self.scheduled.lock().unwrap_or_else(|e| e.into_inner());
        if s.1.insert(key) {
            s.0.push_back(key);
        }
    }

    pub fn scheduled_count(&self) -> usize {
        self.scheduled.lock().unwrap_or_else(|e| e.into_inner()).0.len()
    }

    /// Loads every tile scheduled by fallback resolution. Returns how many were loaded.
    pub fn drain_scheduled(&self) -> Result<usize, CacheError> {
        let keys: Vec<TileKey> = {
            let mut s = self.scheduled.lock().unwrap_or_else(|e| e.into_inner());
            s.1.clear();
            s.0.drain(..).collect()
        };
        for &k in &keys {
            self.get_tile(k)?;
        }
        Ok(keys.len())
    }
}
