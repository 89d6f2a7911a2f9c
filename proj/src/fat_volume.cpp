#include <algorithm>
#include <mutex>
#include <set>

#include "usbb/error.hpp"
#include "usbb/fatfs.hpp"

namespace usbb::fat {

using blockdev::kSectorSize;

namespace {

constexpr std::uint32_t kFsInfoLead = 0x41615252;
constexpr std::uint32_t kFsInfoStruct = 0x61417272;
constexpr std::uint32_t kFsInfoTrail = 0xAA550000;
constexpr std::size_t kMaxDirEntries = 65536;
constexpr std::size_t kLfnChars = 13;
constexpr std::size_t kLfnOffsets[kLfnChars] = {1, 3, 5, 7, 9, 14, 16, 18, 20, 22, 24, 28, 30};

std::u16string lfn_piece(ByteSpan raw) {
  std::u16string out;
  for (std::size_t off : kLfnOffsets) out.push_back(static_cast<char16_t>(load_le16(raw, off)));
  return out;
}

bool is_dot_entry(const DirEntry& e) {
  return e.short_name[0] == '.' && (e.attributes & attr::kDirectory) != 0;
}

bool is_label_entry(const DirEntry& e) {
  return (e.attributes & attr::kVolumeLabel) != 0 && (e.attributes & attr::kLongName) != attr::kLongName;
}

}  // namespace

struct Volume::Directory {
  std::uint32_t key = 0;  // 0 is the root in both variants
  bool fixed = false;     // FAT16 root region
  std::vector<std::uint64_t> lbas;
  std::vector<std::uint32_t> clusters;
  Bytes data;

  std::size_t slots() const { return data.size() / kDirEntrySize; }
  std::uint8_t* slot(std::size_t i) { return data.data() + i * kDirEntrySize; }
  const std::uint8_t* slot(std::size_t i) const { return data.data() + i * kDirEntrySize; }
};

struct Volume::Record {
  DirEntry entry;
  std::size_t first_slot = 0;
  std::size_t short_slot = 0;
};

std::vector<Volume::Record> Volume::records(const Directory& dir) const {
  std::vector<Record> out;
  struct Pending {
    std::uint8_t count = 0;
    std::uint8_t next = 0;
    std::uint8_t checksum = 0;
    std::size_t start = 0;
    std::vector<std::u16string> pieces;
  };
  std::optional<Pending> lfn;
  for (std::size_t i = 0; i < dir.slots(); ++i) {
    ByteSpan raw(dir.slot(i), kDirEntrySize);
    std::uint8_t first = raw[0];
    if (first == kEntryEnd) break;
    if (first == kEntryDeleted) {
      lfn.reset();
      continue;
    }
    if ((raw[11] & 0x3F) == attr::kLongName) {
      std::uint8_t ord = first & 0x1F;
      if (first & 0x40) {
        lfn.reset();
        if (ord == 0 || ord > 20) continue;
        lfn = Pending{ord, ord, raw[13], i, std::vector<std::u16string>(ord)};
      }
      if (!lfn || ord != lfn->next || raw[13] != lfn->checksum || ord == 0) {
        lfn.reset();
        continue;
      }
      lfn->pieces[ord - 1] = lfn_piece(raw);
      --lfn->next;
      continue;
    }
    Record rec;
    rec.entry = DirEntry::parse(raw);
    rec.first_slot = rec.short_slot = i;
    if (lfn && lfn->next == 0 && lfn_checksum(rec.entry.short_name) == lfn->checksum) {
      std::u16string name;
      for (auto& p : lfn->pieces) name += p;
      auto end = name.find(u'\0');
      if (end != std::u16string::npos) name.resize(end);
      rec.entry.long_name = names::utf16_to_utf8(name);
      rec.first_slot = lfn->start;
    }
    lfn.reset();
    out.push_back(std::move(rec));
  }
  return out;
}

Volume::Volume(std::shared_ptr<blockdev::BlockDevice> dev, Clock clock)
    : dev_(std::move(dev)), clock_(std::move(clock)) {}

std::shared_ptr<Volume> mount(std::shared_ptr<blockdev::BlockDevice> dev, Clock clock) {
  if (!dev) throw Error(ErrorCode::kInvalidArgument, "no device");
  std::shared_ptr<Volume> vol(new Volume(std::move(dev), std::move(clock)));
  vol->load();
  return vol;
}

void Volume::load() {
  Bytes boot(kSectorSize);
  dev_->read(0, 1, boot);
  bpb_ = parse_boot_sector(boot);
  geometry_ = derive_geometry(bpb_);
  if (bpb_.total_sectors > dev_->sector_count()) {
    throw Error(ErrorCode::kInconsistentBpb, "volume larger than device");
  }

  fat_.assign(static_cast<std::size_t>(bpb_.sectors_per_fat) * kSectorSize, 0);
  constexpr std::uint32_t kChunk = 128;
  for (std::uint32_t s = 0; s < bpb_.sectors_per_fat; s += kChunk) {
    std::uint32_t n = std::min(kChunk, bpb_.sectors_per_fat - s);
    dev_->read(geometry_.first_fat_sector + s, n,
               MutableByteSpan(fat_.data() + static_cast<std::size_t>(s) * kSectorSize,
                               static_cast<std::size_t>(n) * kSectorSize));
  }
  fat_dirty_.assign(bpb_.sectors_per_fat, false);

  free_clusters_ = 0;
  for (std::uint32_t c = 2; c < geometry_.cluster_count + 2; ++c) {
    if (get(c) == 0) ++free_clusters_;
  }
  next_free_ = 2;

  if (geometry_.variant == Variant::kFat32 && bpb_.fsinfo_sector != 0 &&
      bpb_.fsinfo_sector < bpb_.reserved_sectors) {
    Bytes info(kSectorSize);
    dev_->read(bpb_.fsinfo_sector, 1, info);
    bool valid = load_le32(info, 0) == kFsInfoLead && load_le32(info, 484) == kFsInfoStruct &&
                 load_le32(info, 508) == kFsInfoTrail;
    if (valid) {
      std::uint32_t hint = load_le32(info, 492);
      if (hint >= 2 && hint < geometry_.cluster_count + 2) next_free_ = hint;
      if (load_le32(info, 488) != free_clusters_) fsinfo_dirty_ = true;
    } else {
      fsinfo_dirty_ = true;
    }
  }

  label_ = bpb_.volume_label;
  Directory root = load_dir(0);
  for (const auto& rec : records(root)) {
    if (is_label_entry(rec.entry)) {
      std::string raw(reinterpret_cast<const char*>(rec.entry.short_name.data()), 11);
      while (!raw.empty() && raw.back() == ' ') raw.pop_back();
      label_ = raw;
      break;
    }
  }
  if (label_.empty()) label_ = "NO NAME";

  if (fsinfo_dirty_ && !dev_->read_only()) commit_fat();
}

std::chrono::system_clock::time_point Volume::now() const {
  return clock_ ? clock_() : std::chrono::system_clock::now();
}

void Volume::ensure_writable() const {
  if (dev_->read_only()) throw Error(ErrorCode::kReadOnlyVolume, "volume is write-protected");
}

std::uint32_t Volume::root_cluster() const {
  return geometry_.variant == Variant::kFat32 ? bpb_.root_cluster : 0;
}

// -- FAT table -------------------------------------------------------------

std::uint32_t Volume::get(std::uint32_t cluster) const {
  if (geometry_.variant == Variant::kFat16) return load_le16(fat_, cluster * 2ull);
  return load_le32(fat_, cluster * 4ull) & kFat32Mask;
}

void Volume::set(std::uint32_t cluster, std::uint32_t value) {
  std::size_t offset;
  std::uint32_t old;
  if (geometry_.variant == Variant::kFat16) {
    offset = cluster * 2ull;
    old = load_le16(fat_, offset);
    store_le16(fat_, offset, static_cast<std::uint16_t>(value));
  } else {
    offset = cluster * 4ull;
    old = load_le32(fat_, offset);
    store_le32(fat_, offset, (old & ~kFat32Mask) | (value & kFat32Mask));
  }
  if (in_txn_) journal_.emplace_back(cluster, old);
  fat_dirty_[offset / kSectorSize] = true;
}

bool Volume::is_eoc(std::uint32_t value) const {
  return geometry_.variant == Variant::kFat16 ? value >= kFat16EndOfChain : value >= kFat32EndOfChain;
}

std::uint32_t Volume::eoc() const {
  return geometry_.variant == Variant::kFat16 ? 0xFFFF : 0x0FFFFFFF;
}

std::uint32_t Volume::allocate(std::uint32_t previous) {
  const std::uint32_t first = 2;
  const std::uint32_t end = geometry_.cluster_count + 2;
  if (free_clusters_ == 0) throw Error(ErrorCode::kDiskFull, "no free clusters");
  std::uint32_t start = (next_free_ >= first && next_free_ < end) ? next_free_ : first;
  std::uint32_t c = start;
  do {
    if (get(c) == 0) {
      set(c, eoc());
      if (previous >= first) set(previous, c);
      --free_clusters_;
      next_free_ = c + 1 < end ? c + 1 : first;
      fsinfo_dirty_ = true;
      return c;
    }
    c = c + 1 < end ? c + 1 : first;
  } while (c != start);
  throw Error(ErrorCode::kDiskFull, "no free clusters");
}

void Volume::free_chain(std::uint32_t start) {
  if (start < 2) return;
  for (std::uint32_t c : chain_locked(start)) {
    set(c, 0);
    ++free_clusters_;
  }
  fsinfo_dirty_ = true;
}

std::vector<std::uint32_t> Volume::chain_locked(std::uint32_t start) const {
  std::vector<std::uint32_t> out;
  const std::uint32_t max = geometry_.cluster_count + 1;
  std::uint32_t c = start;
  while (true) {
    if (c < 2 || c > max) {
      throw Error(ErrorCode::kCorruptVolume, "cluster " + std::to_string(c) + " out of range");
    }
    if (out.size() >= geometry_.cluster_count) {
      throw Error(ErrorCode::kCorruptVolume, "cluster chain loops at " + std::to_string(start));
    }
    out.push_back(c);
    std::uint32_t next = get(c);
    if (is_eoc(next)) break;
    if (next == 0) throw Error(ErrorCode::kCorruptVolume, "chain runs into free cluster");
    c = next;
  }
  return out;
}

void Volume::commit_fat() {
  const std::uint32_t spf = bpb_.sectors_per_fat;
  std::uint32_t s = 0;
  while (s < spf) {
    if (!fat_dirty_[s]) {
      ++s;
      continue;
    }
    std::uint32_t e = s;
    while (e < spf && fat_dirty_[e] && e - s < 128) ++e;
    ByteSpan run(fat_.data() + static_cast<std::size_t>(s) * kSectorSize,
                 static_cast<std::size_t>(e - s) * kSectorSize);
    for (std::uint8_t copy = 0; copy < bpb_.num_fats; ++copy) {
      dev_->write(geometry_.first_fat_sector + static_cast<std::uint64_t>(copy) * spf + s, e - s, run);
    }
    std::fill(fat_dirty_.begin() + s, fat_dirty_.begin() + e, false);
    s = e;
  }
  if (geometry_.variant == Variant::kFat32 && fsinfo_dirty_ && bpb_.fsinfo_sector != 0 &&
      bpb_.fsinfo_sector < bpb_.reserved_sectors) {
    Bytes info(kSectorSize, 0);
    dev_->read(bpb_.fsinfo_sector, 1, info);
    store_le32(info, 0, kFsInfoLead);
    store_le32(info, 484, kFsInfoStruct);
    store_le32(info, 488, free_clusters_);
    store_le32(info, 492, next_free_);
    store_le32(info, 508, kFsInfoTrail);
    dev_->write(bpb_.fsinfo_sector, 1, info);
  }
  fsinfo_dirty_ = false;
}

void Volume::begin_txn() {
  in_txn_ = true;
  journal_.clear();
  saved_free_ = free_clusters_;
  saved_next_ = next_free_;
}

void Volume::rollback_txn() {
  in_txn_ = false;
  for (auto it = journal_.rbegin(); it != journal_.rend(); ++it) {
    std::size_t width = geometry_.variant == Variant::kFat16 ? 2 : 4;
    std::size_t offset = it->first * width;
    if (width == 2) {
      store_le16(fat_, offset, static_cast<std::uint16_t>(it->second));
    } else {
      store_le32(fat_, offset, it->second);
    }
  }
  journal_.clear();
  free_clusters_ = saved_free_;
  next_free_ = saved_next_;
}

void Volume::end_txn() {
  in_txn_ = false;
  journal_.clear();
  commit_fat();
}

// -- clusters and directories ----------------------------------------------

void Volume::read_cluster_run(std::uint32_t cluster, std::uint32_t count, MutableByteSpan out) const {
  dev_->read(geometry_.cluster_to_sector(cluster), count * bpb_.sectors_per_cluster, out);
}

void Volume::write_cluster(std::uint32_t cluster, ByteSpan data) {
  dev_->write(geometry_.cluster_to_sector(cluster), bpb_.sectors_per_cluster, data);
}

void Volume::zero_cluster(std::uint32_t cluster) {
  Bytes zeros(geometry_.bytes_per_cluster, 0);
  write_cluster(cluster, zeros);
}

Volume::Directory Volume::load_dir(std::uint32_t key) const {
  Directory dir;
  dir.key = key;
  if (key == 0 && geometry_.variant == Variant::kFat16) {
    dir.fixed = true;
    dir.data.resize(static_cast<std::size_t>(geometry_.root_dir_sectors) * kSectorSize);
    dev_->read(geometry_.first_root_dir_sector, geometry_.root_dir_sectors, dir.data);
    for (std::uint32_t i = 0; i < geometry_.root_dir_sectors; ++i) {
      dir.lbas.push_back(geometry_.first_root_dir_sector + i);
    }
    return dir;
  }
  std::uint32_t start = key == 0 ? bpb_.root_cluster : key;
  dir.clusters = chain_locked(start);
  const std::size_t cb = geometry_.bytes_per_cluster;
  dir.data.resize(dir.clusters.size() * cb);
  for (std::size_t i = 0; i < dir.clusters.size(); ++i) {
    read_cluster_run(dir.clusters[i], 1, MutableByteSpan(dir.data.data() + i * cb, cb));
    std::uint64_t lba = geometry_.cluster_to_sector(dir.clusters[i]);
    for (std::uint32_t k = 0; k < bpb_.sectors_per_cluster; ++k) dir.lbas.push_back(lba + k);
  }
  return dir;
}

void Volume::store_slots(Directory& dir, std::size_t first, std::size_t count) {
  std::size_t s0 = first * kDirEntrySize / kSectorSize;
  std::size_t s1 = ((first + count) * kDirEntrySize - 1) / kSectorSize;
  for (std::size_t s = s0; s <= s1; ++s) {
    dev_->write(dir.lbas[s], 1, ByteSpan(dir.data.data() + s * kSectorSize, kSectorSize));
  }
}

std::optional<Volume::Record> Volume::find(const Directory& dir, std::string_view name) const {
  for (auto& rec : records(dir)) {
    if (is_dot_entry(rec.entry) || is_label_entry(rec.entry)) continue;
    if ((!rec.entry.long_name.empty() && names::equal_ignore_case(rec.entry.long_name, name)) ||
        names::equal_ignore_case(rec.entry.short_display(), name)) {
      return rec;
    }
  }
  return std::nullopt;
}

std::uint32_t Volume::resolve_dir(std::string_view path) const {
  std::uint32_t key = 0;
  std::string walked;
  for (const auto& part : names::split_path(path)) {
    walked += "/" + part;
    auto rec = find(load_dir(key), part);
    if (!rec) throw Error(ErrorCode::kNotFound, walked);
    if (!rec->entry.is_directory()) throw Error(ErrorCode::kNotADirectory, walked);
    if (rec->entry.first_cluster < 2) throw Error(ErrorCode::kCorruptVolume, walked + " has no cluster");
    key = rec->entry.first_cluster;
  }
  return key;
}

std::pair<std::uint32_t, std::string> Volume::resolve_parent(std::string_view path) const {
  auto parts = names::split_path(path);
  if (parts.empty()) throw Error(ErrorCode::kNameInvalid, "root directory has no name");
  std::string parent = "/";
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) parent += parts[i] + "/";
  return {resolve_dir(parent), parts.back()};
}

DirEntry Volume::lookup(std::string_view path) const {
  if (names::split_path(path).empty()) {
    DirEntry root;
    root.short_name.fill(' ');
    root.attributes = attr::kDirectory;
    root.first_cluster = root_cluster();
    root.long_name = "/";
    return root;
  }
  auto [key, name] = resolve_parent(path);
  auto rec = find(load_dir(key), name);
  if (!rec) throw Error(ErrorCode::kNotFound, std::string(path));
  return rec->entry;
}

std::size_t Volume::reserve_slots(Directory& dir, std::size_t count) {
  while (true) {
    std::size_t run = 0;
    for (std::size_t i = 0; i < dir.slots(); ++i) {
      std::uint8_t first = dir.slot(i)[0];
      run = (first == kEntryEnd || first == kEntryDeleted) ? run + 1 : 0;
      if (run == count) return i + 1 - count;
    }
    if (dir.fixed) throw Error(ErrorCode::kDiskFull, "root directory full");
    const std::size_t cb = geometry_.bytes_per_cluster;
    if ((dir.data.size() + cb) / kDirEntrySize > kMaxDirEntries) {
      throw Error(ErrorCode::kDiskFull, "directory full");
    }
    std::uint32_t c = allocate(dir.clusters.back());
    zero_cluster(c);
    dir.clusters.push_back(c);
    dir.data.resize(dir.data.size() + cb, 0);
    std::uint64_t lba = geometry_.cluster_to_sector(c);
    for (std::uint32_t k = 0; k < bpb_.sectors_per_cluster; ++k) dir.lbas.push_back(lba + k);
  }
}

DirEntry Volume::insert_entry(std::uint32_t dir_key, const std::string& name, std::uint8_t attributes,
                              std::uint32_t first_cluster, std::uint32_t size) {
  Directory dir = load_dir(dir_key);
  auto existing = records(dir);
  for (auto& rec : existing) {
    if (is_dot_entry(rec.entry) || is_label_entry(rec.entry)) continue;
    if ((!rec.entry.long_name.empty() && names::equal_ignore_case(rec.entry.long_name, name)) ||
        names::equal_ignore_case(rec.entry.short_display(), name)) {
      throw Error(ErrorCode::kExistsNoOverwrite, name);
    }
  }

  std::array<std::uint8_t, 11> short_name;
  bool needs_lfn = !names::is_plain_short_name(name);
  if (!needs_lfn) {
    short_name = names::to_short_field(name);
  } else {
    std::set<std::array<std::uint8_t, 11>> taken;
    for (auto& rec : existing) taken.insert(rec.entry.short_name);
    auto [basis, lossy] = names::basis_name(name);
    short_name = basis;
    if (lossy || taken.count(basis) != 0) {
      std::uint32_t n = 1;
      for (; n < 1000000; ++n) {
        short_name = names::with_numeric_tail(basis, n);
        if (taken.count(short_name) == 0) break;
      }
      if (n == 1000000) throw Error(ErrorCode::kDiskFull, "no free short alias for " + name);
    }
  }

  std::u16string wide = names::utf8_to_utf16(name);
  std::size_t lfn_count = needs_lfn ? (wide.size() + kLfnChars - 1) / kLfnChars : 0;
  std::size_t start = reserve_slots(dir, lfn_count + 1);
  std::uint8_t sum = lfn_checksum(short_name);
  for (std::size_t k = lfn_count; k >= 1; --k) {
    std::uint8_t* raw = dir.slot(start + (lfn_count - k));
    std::fill_n(raw, kDirEntrySize, 0);
    raw[0] = static_cast<std::uint8_t>(k | (k == lfn_count ? 0x40 : 0));
    raw[11] = attr::kLongName;
    raw[13] = sum;
    MutableByteSpan span(raw, kDirEntrySize);
    for (std::size_t j = 0; j < kLfnChars; ++j) {
      std::size_t idx = (k - 1) * kLfnChars + j;
      std::uint16_t ch = idx < wide.size() ? wide[idx] : (idx == wide.size() ? 0x0000 : 0xFFFF);
      store_le16(span, kLfnOffsets[j], ch);
    }
  }

  DosDateTime stamp = to_dos(now());
  DirEntry entry;
  entry.short_name = short_name;
  entry.attributes = attributes;
  entry.create_tenths = stamp.tenths;
  entry.create_time = entry.modify_time = stamp.time;
  entry.create_date = entry.modify_date = entry.access_date = stamp.date;
  entry.first_cluster = first_cluster;
  entry.size_bytes = size;
  auto raw = entry.serialize();
  std::copy(raw.begin(), raw.end(), dir.slot(start + lfn_count));
  store_slots(dir, start, lfn_count + 1);
  if (needs_lfn) entry.long_name = name;
  return entry;
}

void Volume::erase_entry(std::uint32_t dir_key, const Record& rec) {
  Directory dir = load_dir(dir_key);
  for (std::size_t i = rec.first_slot; i <= rec.short_slot; ++i) dir.slot(i)[0] = kEntryDeleted;
  store_slots(dir, rec.first_slot, rec.short_slot - rec.first_slot + 1);
}

// -- public operations -----------------------------------------------------

std::vector<DirEntry> Volume::list_dir(std::string_view path) {
  std::shared_lock lock(mutex_);
  Directory dir = load_dir(resolve_dir(path));
  std::vector<DirEntry> out;
  for (auto& rec : records(dir)) {
    if (is_dot_entry(rec.entry) || is_label_entry(rec.entry)) continue;
    out.push_back(std::move(rec.entry));
  }
  return out;
}

DirEntry Volume::stat(std::string_view path) {
  std::shared_lock lock(mutex_);
  return lookup(path);
}

bool Volume::exists(std::string_view path) {
  std::shared_lock lock(mutex_);
  try {
    lookup(path);
    return true;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kNotFound || e.code() == ErrorCode::kNotADirectory) return false;
    throw;
  }
}

Bytes Volume::read_file(std::string_view path) {
  auto reader = open_reader(path);
  Bytes out(reader->size());
  std::size_t got = reader->read(0, out);
  out.resize(got);
  return out;
}

DirEntry Volume::write_file(std::string_view path, ByteSpan data, bool overwrite) {
  {
    std::shared_lock lock(mutex_);
    ensure_writable();
    if (clusters_for(data.size()) > free_clusters_) {
      throw Error(ErrorCode::kDiskFull, "need " + std::to_string(clusters_for(data.size())) +
                                            " clusters, " + std::to_string(free_clusters_) + " free");
    }
  }
  auto writer = open_writer(path, overwrite);
  writer->append(data);
  return writer->commit();
}

DirEntry Volume::create_dir(std::string_view path) {
  std::unique_lock lock(mutex_);
  ensure_writable();
  auto [parent, name] = resolve_parent(path);
  if (find(load_dir(parent), name)) throw Error(ErrorCode::kExistsNoOverwrite, std::string(path));
  begin_txn();
  try {
    std::uint32_t c = allocate(0);
    DosDateTime stamp = to_dos(now());
    Bytes block(geometry_.bytes_per_cluster, 0);
    for (int i = 0; i < 2; ++i) {
      DirEntry dot;
      dot.short_name.fill(' ');
      dot.short_name[0] = '.';
      if (i == 1) dot.short_name[1] = '.';
      dot.attributes = attr::kDirectory;
      dot.create_time = dot.modify_time = stamp.time;
      dot.create_date = dot.modify_date = dot.access_date = stamp.date;
      dot.first_cluster = i == 0 ? c : parent;
      auto raw = dot.serialize();
      std::copy(raw.begin(), raw.end(), block.begin() + i * static_cast<std::ptrdiff_t>(kDirEntrySize));
    }
    write_cluster(c, block);
    DirEntry entry = insert_entry(parent, name, attr::kDirectory, c, 0);
    end_txn();
    return entry;
  } catch (...) {
    rollback_txn();
    throw;
  }
}

void Volume::remove(std::string_view path) {
  std::unique_lock lock(mutex_);
  ensure_writable();
  auto [parent, name] = resolve_parent(path);
  auto rec = find(load_dir(parent), name);
  if (!rec) throw Error(ErrorCode::kNotFound, std::string(path));
  if (rec->entry.is_directory() && rec->entry.first_cluster >= 2) {
    for (auto& child : records(load_dir(rec->entry.first_cluster))) {
      if (!is_dot_entry(child.entry)) throw Error(ErrorCode::kDirNotEmpty, std::string(path));
    }
  }
  begin_txn();
  try {
    erase_entry(parent, *rec);
    free_chain(rec->entry.first_cluster);
    end_txn();
  } catch (...) {
    rollback_txn();
    throw;
  }
}

VolumeInfo Volume::info() {
  std::shared_lock lock(mutex_);
  VolumeInfo v;
  v.variant = geometry_.variant;
  v.bytes_per_cluster = geometry_.bytes_per_cluster;
  v.cluster_count = geometry_.cluster_count;
  v.free_clusters = free_clusters_;
  v.total_bytes = static_cast<std::uint64_t>(geometry_.cluster_count) * geometry_.bytes_per_cluster;
  v.free_bytes = static_cast<std::uint64_t>(free_clusters_) * geometry_.bytes_per_cluster;
  v.label = label_;
  return v;
}

std::unique_ptr<FileWriter> Volume::open_writer(std::string_view path, bool overwrite) {
  std::unique_lock lock(mutex_);
  ensure_writable();
  auto [parent, name] = resolve_parent(path);
  auto rec = find(load_dir(parent), name);
  bool replace = false;
  if (rec) {
    if (rec->entry.is_directory()) throw Error(ErrorCode::kIsADirectory, std::string(path));
    if (!overwrite) throw Error(ErrorCode::kExistsNoOverwrite, std::string(path));
    replace = true;
  }
  return std::unique_ptr<FileWriter>(new FileWriter(shared_from_this(), parent, name, replace));
}

std::unique_ptr<FileReader> Volume::open_reader(std::string_view path) {
  std::shared_lock lock(mutex_);
  DirEntry e = lookup(path);
  if (e.is_directory()) throw Error(ErrorCode::kIsADirectory, std::string(path));
  std::vector<std::uint32_t> clusters;
  if (e.first_cluster != 0) clusters = chain_locked(e.first_cluster);
  if (clusters.size() < clusters_for(e.size_bytes)) {
    throw Error(ErrorCode::kCorruptVolume, std::string(path) + " is shorter than its size");
  }
  return std::unique_ptr<FileReader>(new FileReader(shared_from_this(), std::move(clusters), e.size_bytes));
}

std::uint32_t Volume::free_clusters() const {
  std::shared_lock lock(mutex_);
  return free_clusters_;
}

std::uint32_t Volume::count_free_clusters() const {
  std::shared_lock lock(mutex_);
  std::uint32_t n = 0;
  for (std::uint32_t c = 2; c < geometry_.cluster_count + 2; ++c) {
    if (get(c) == 0) ++n;
  }
  return n;
}

std::uint32_t Volume::fat_entry(std::uint32_t cluster) const {
  std::shared_lock lock(mutex_);
  if (cluster >= geometry_.cluster_count + 2) throw Error(ErrorCode::kInvalidArgument, "cluster out of range");
  return get(cluster);
}

std::vector<std::uint32_t> Volume::chain(std::uint32_t start) const {
  std::shared_lock lock(mutex_);
  return chain_locked(start);
}

std::uint32_t Volume::clusters_for(std::uint64_t bytes) const {
  return static_cast<std::uint32_t>((bytes + geometry_.bytes_per_cluster - 1) / geometry_.bytes_per_cluster);
}

void Volume::flush() {
  std::unique_lock lock(mutex_);
  commit_fat();
  dev_->flush();
}

// -- streaming I/O ---------------------------------------------------------

FileWriter::FileWriter(std::shared_ptr<Volume> volume, std::uint32_t dir_cluster, std::string name,
                       bool replace)
    : volume_(std::move(volume)), dir_cluster_(dir_cluster), name_(std::move(name)), replace_(replace) {}

FileWriter::~FileWriter() {
  if (done_) return;
  try {
    abort();
  } catch (...) {
  }
}

void FileWriter::write_clusters(ByteSpan data) {
  auto& v = *volume_;
  const std::size_t cb = v.geometry_.bytes_per_cluster;
  const std::size_t n = data.size() / cb;
  std::size_t first_new = clusters_.size();
  for (std::size_t i = 0; i < n; ++i) {
    clusters_.push_back(v.allocate(clusters_.empty() ? 0 : clusters_.back()));
  }
  std::size_t i = first_new;
  while (i < clusters_.size()) {
    std::size_t j = i + 1;
    while (j < clusters_.size() && clusters_[j] == clusters_[j - 1] + 1 && j - i < 128) ++j;
    std::size_t off = (i - first_new) * cb;
    v.dev_->write(v.geometry_.cluster_to_sector(clusters_[i]),
                  static_cast<std::uint32_t>((j - i) * v.bpb_.sectors_per_cluster),
                  data.subspan(off, (j - i) * cb));
    i = j;
  }
}

void FileWriter::append(ByteSpan data) {
  if (done_) throw Error(ErrorCode::kInvalidArgument, "writer already closed");
  std::unique_lock lock(volume_->mutex_);
  if (size_ + data.size() > 0xFFFFFFFFull) throw Error(ErrorCode::kDiskFull, "file exceeds 4 GiB");
  const std::size_t cb = volume_->geometry_.bytes_per_cluster;
  if (!tail_.empty()) {
    std::size_t take = std::min(cb - tail_.size(), data.size());
    tail_.insert(tail_.end(), data.begin(), data.begin() + static_cast<std::ptrdiff_t>(take));
    data = data.subspan(take);
    if (tail_.size() == cb) {
      write_clusters(tail_);
      tail_.clear();
    }
  }
  std::size_t whole = data.size() / cb * cb;
  if (whole > 0) write_clusters(data.first(whole));
  tail_.insert(tail_.end(), data.begin() + static_cast<std::ptrdiff_t>(whole), data.end());
  size_ = static_cast<std::uint64_t>(clusters_.size()) * cb + tail_.size();
}

DirEntry FileWriter::commit() {
  if (done_) throw Error(ErrorCode::kInvalidArgument, "writer already closed");
  auto& v = *volume_;
  std::unique_lock lock(v.mutex_);
  const std::size_t cb = v.geometry_.bytes_per_cluster;
  if (!tail_.empty()) {
    Bytes last = tail_;
    last.resize(cb, 0);
    write_clusters(last);
    tail_.clear();
  }
  std::uint32_t first = clusters_.empty() ? 0 : clusters_.front();
  auto size = static_cast<std::uint32_t>(size_);
  v.begin_txn();
  try {
    DirEntry entry;
    if (replace_) {
      Volume::Directory dir = v.load_dir(dir_cluster_);
      auto rec = v.find(dir, name_);
      if (!rec) throw Error(ErrorCode::kNotFound, name_);
      if (rec->entry.is_directory()) throw Error(ErrorCode::kIsADirectory, name_);
      std::uint32_t old = rec->entry.first_cluster;
      DosDateTime stamp = to_dos(v.now());
      entry = rec->entry;
      entry.first_cluster = first;
      entry.size_bytes = size;
      entry.modify_time = stamp.time;
      entry.modify_date = entry.access_date = stamp.date;
      entry.attributes |= attr::kArchive;
      auto raw = entry.serialize();
      std::copy(raw.begin(), raw.end(), dir.slot(rec->short_slot));
      v.store_slots(dir, rec->short_slot, 1);
      v.free_chain(old);
    } else {
      entry = v.insert_entry(dir_cluster_, name_, attr::kArchive, first, size);
    }
    v.end_txn();
    done_ = true;
    return entry;
  } catch (...) {
    v.rollback_txn();
    for (std::uint32_t c : clusters_) {
      v.set(c, 0);
      ++v.free_clusters_;
    }
    clusters_.clear();
    done_ = true;
    try {
      v.commit_fat();
    } catch (...) {
    }
    throw;
  }
}

void FileWriter::abort() {
  if (done_) return;
  auto& v = *volume_;
  std::unique_lock lock(v.mutex_);
  done_ = true;
  for (std::uint32_t c : clusters_) {
    v.set(c, 0);
    ++v.free_clusters_;
  }
  if (!clusters_.empty()) v.fsinfo_dirty_ = true;
  clusters_.clear();
  tail_.clear();
  v.commit_fat();
}

FileReader::FileReader(std::shared_ptr<Volume> volume, std::vector<std::uint32_t> clusters,
                       std::uint64_t size)
    : volume_(std::move(volume)), clusters_(std::move(clusters)), size_(size) {}

std::size_t FileReader::read(std::uint64_t offset, MutableByteSpan out) {
  if (offset >= size_ || out.empty()) return 0;
  auto& v = *volume_;
  std::shared_lock lock(v.mutex_);
  const std::uint64_t cb = v.geometry_.bytes_per_cluster;
  const std::uint64_t end = std::min<std::uint64_t>(size_, offset + out.size());
  std::size_t first = static_cast<std::size_t>(offset / cb);
  std::size_t last = static_cast<std::size_t>((end - 1) / cb);
  std::size_t written = 0;
  Bytes buf;
  std::size_t i = first;
  while (i <= last) {
    std::size_t j = i + 1;
    while (j <= last && clusters_[j] == clusters_[j - 1] + 1 && j - i < 128) ++j;
    buf.resize(static_cast<std::size_t>((j - i) * cb));
    v.read_cluster_run(clusters_[i], static_cast<std::uint32_t>(j - i), buf);
    std::uint64_t run_start = i * cb;
    std::uint64_t from = std::max(offset, run_start);
    std::uint64_t to = std::min(end, j * cb);
    std::copy(buf.begin() + static_cast<std::ptrdiff_t>(from - run_start),
              buf.begin() + static_cast<std::ptrdiff_t>(to - run_start), out.begin() + written);
    written += static_cast<std::size_t>(to - from);
    i = j;
  }
  return written;
}

}  // namespace usbb::fat
