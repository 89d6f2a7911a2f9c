#include <algorithm>
#include <bit>
#include <cstring>

#include "usbb/error.hpp"
#include "usbb/fatfs.hpp"

namespace usbb::fat {

using blockdev::kSectorSize;

namespace {

constexpr std::uint32_t kFsInfoLead = 0x41615252;
constexpr std::uint32_t kFsInfoStruct = 0x61417272;
constexpr std::uint32_t kFsInfoTrail = 0xAA550000;

std::string field_string(ByteSpan s, std::size_t offset, std::size_t len) {
  std::string out(reinterpret_cast<const char*>(s.data()) + offset, len);
  while (!out.empty() && (out.back() == ' ' || out.back() == '\0')) out.pop_back();
  return out;
}

void put_field(MutableByteSpan s, std::size_t offset, std::size_t len, std::string_view text) {
  std::fill_n(s.begin() + static_cast<std::ptrdiff_t>(offset), len, ' ');
  std::copy_n(text.begin(), std::min(len, text.size()),
              s.begin() + static_cast<std::ptrdiff_t>(offset));
}

void write_zeros(blockdev::BlockDevice& dev, std::uint64_t lba, std::uint64_t count) {
  constexpr std::uint32_t kChunk = 256;
  Bytes zeros(static_cast<std::size_t>(kChunk) * kSectorSize, 0);
  while (count > 0) {
    auto n = static_cast<std::uint32_t>(std::min<std::uint64_t>(count, kChunk));
    dev.write(lba, n, ByteSpan(zeros.data(), static_cast<std::size_t>(n) * kSectorSize));
    lba += n;
    count -= n;
  }
}

bool valid_label(std::string_view label) {
  if (label.empty() || label.size() > 11) return false;
  return std::all_of(label.begin(), label.end(), [](char c) {
    return c == ' ' || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
           std::strchr("!#$%&'()-@^_`{}~", c) != nullptr;
  });
}

struct Layout {
  std::uint16_t reserved;
  std::uint16_t root_entries;
  std::uint32_t fat_sectors;
  std::uint32_t clusters;
};

std::optional<Layout> plan(std::uint64_t sectors, Variant variant, std::uint8_t spc) {
  if (spc == 0 || !std::has_single_bit(static_cast<unsigned>(spc))) return std::nullopt;
  if (sectors > 0xFFFFFFFFull) sectors = 0xFFFFFFFFull;
  Layout l{};
  const bool fat32 = variant == Variant::kFat32;
  l.reserved = fat32 ? 32 : 1;
  l.root_entries = fat32 ? 0 : 512;
  const std::uint64_t root_sectors = (l.root_entries * 32ull + kSectorSize - 1) / kSectorSize;
  const std::uint64_t entry_bytes = fat32 ? 4 : 2;
  std::uint64_t fat = 1;
  for (int guard = 0; guard < 64; ++guard) {
    std::uint64_t meta = l.reserved + 2 * fat + root_sectors;
    if (meta >= sectors) return std::nullopt;
    std::uint64_t clusters = (sectors - meta) / spc;
    std::uint64_t need = ((clusters + 2) * entry_bytes + kSectorSize - 1) / kSectorSize;
    if (need <= fat) {
      l.fat_sectors = static_cast<std::uint32_t>(fat);
      l.clusters = static_cast<std::uint32_t>(std::min<std::uint64_t>(clusters, 0xFFFFFFFF));
      return l;
    }
    fat = need;
  }
  return std::nullopt;
}

bool fits(Variant variant, std::uint32_t clusters) {
  if (variant == Variant::kFat16) return clusters >= kFat16MinClusters && clusters < kFat32MinClusters;
  return clusters >= kFat32MinClusters && clusters <= kFat32MaxClusters;
}

std::uint8_t default_fat32_spc(std::uint64_t sectors) {
  const std::uint64_t bytes = sectors * kSectorSize;
  constexpr std::uint64_t kMiB = 1024ull * 1024;
  if (bytes <= 260 * kMiB) return 1;
  if (bytes <= 8192 * kMiB) return 8;
  if (bytes <= 16384 * kMiB) return 16;
  if (bytes <= 32768 * kMiB) return 32;
  return 64;
}

}  // namespace

std::uint64_t Geometry::cluster_to_sector(std::uint32_t cluster) const {
  return first_data_sector + static_cast<std::uint64_t>(cluster - 2) * (bytes_per_cluster / kSectorSize);
}

Geometry derive_geometry(const BiosParameterBlock& bpb) {
  auto bad = [](const std::string& what) { return Error(ErrorCode::kInconsistentBpb, what); };
  if (bpb.bytes_per_sector != kSectorSize) {
    throw bad("bytes per sector " + std::to_string(bpb.bytes_per_sector));
  }
  if (bpb.sectors_per_cluster == 0 || !std::has_single_bit(static_cast<unsigned>(bpb.sectors_per_cluster))) {
    throw bad("sectors per cluster " + std::to_string(bpb.sectors_per_cluster));
  }
  if (bpb.reserved_sectors == 0) throw bad("no reserved sectors");
  if (bpb.num_fats == 0) throw bad("no FAT copies");
  if (bpb.total_sectors == 0) throw bad("total sectors is zero");
  if (bpb.sectors_per_fat == 0) throw bad("FAT size is zero");

  Geometry g;
  g.root_dir_sectors = (bpb.root_entry_count * 32u + kSectorSize - 1) / kSectorSize;
  g.first_fat_sector = bpb.reserved_sectors;
  std::uint64_t root_start = bpb.reserved_sectors + static_cast<std::uint64_t>(bpb.num_fats) * bpb.sectors_per_fat;
  std::uint64_t data_start = root_start + g.root_dir_sectors;
  if (data_start >= bpb.total_sectors) throw bad("metadata exceeds volume");
  g.first_root_dir_sector = static_cast<std::uint32_t>(root_start);
  g.first_data_sector = static_cast<std::uint32_t>(data_start);
  g.cluster_count = static_cast<std::uint32_t>((bpb.total_sectors - data_start) / bpb.sectors_per_cluster);
  g.bytes_per_cluster = static_cast<std::uint32_t>(bpb.sectors_per_cluster) * kSectorSize;
  if (g.cluster_count < kFat16MinClusters) {
    throw Error(ErrorCode::kUnsupportedVariant,
                "FAT12 volume (" + std::to_string(g.cluster_count) + " clusters)");
  }
  g.variant = g.cluster_count < kFat32MinClusters ? Variant::kFat16 : Variant::kFat32;
  if (g.variant == Variant::kFat32 && g.cluster_count > kFat32MaxClusters) throw bad("too many clusters");
  const std::uint64_t entry_bytes = g.variant == Variant::kFat32 ? 4 : 2;
  if (static_cast<std::uint64_t>(bpb.sectors_per_fat) * kSectorSize < (g.cluster_count + 2ull) * entry_bytes) {
    throw bad("FAT too small for " + std::to_string(g.cluster_count) + " clusters");
  }
  if (g.variant == Variant::kFat16 && bpb.root_entry_count == 0) throw bad("FAT16 without root directory");
  if (g.variant == Variant::kFat32) {
    if (bpb.root_entry_count != 0) throw bad("FAT32 with fixed root directory");
    if (bpb.root_cluster < 2 || bpb.root_cluster > g.cluster_count + 1) {
      throw bad("root cluster " + std::to_string(bpb.root_cluster));
    }
  }
  return g;
}

BiosParameterBlock parse_boot_sector(ByteSpan s) {
  if (s.size() != kSectorSize) throw Error(ErrorCode::kInvalidArgument, "boot sector size");
  std::string oem(reinterpret_cast<const char*>(s.data()) + 3, 8);
  if (oem == "NTFS    ") throw Error(ErrorCode::kUnsupportedVariant, "NTFS volume");
  if (oem == "EXFAT   ") throw Error(ErrorCode::kUnsupportedVariant, "exFAT volume");
  if (s[510] != 0x55 || s[511] != 0xAA) {
    throw Error(ErrorCode::kBadSignature, "boot sector lacks 0x55AA");
  }
  BiosParameterBlock b;
  b.oem_name = field_string(s, 3, 8);
  b.bytes_per_sector = load_le16(s, 11);
  b.sectors_per_cluster = s[13];
  b.reserved_sectors = load_le16(s, 14);
  b.num_fats = s[16];
  b.root_entry_count = load_le16(s, 17);
  std::uint16_t total16 = load_le16(s, 19);
  b.total_sectors = total16 != 0 ? total16 : load_le32(s, 32);
  b.media = s[21];
  std::uint16_t fat16 = load_le16(s, 22);
  const bool fat32_layout = fat16 == 0;
  b.sectors_per_fat = fat32_layout ? load_le32(s, 36) : fat16;
  if (fat32_layout) {
    b.root_cluster = load_le32(s, 44);
    b.fsinfo_sector = load_le16(s, 48);
    b.backup_boot_sector = load_le16(s, 50);
    if (s[66] == 0x29) {
      b.volume_id = load_le32(s, 67);
      b.volume_label = field_string(s, 71, 11);
    }
  } else if (s[38] == 0x29) {
    b.volume_id = load_le32(s, 39);
    b.volume_label = field_string(s, 43, 11);
  }
  Geometry g = derive_geometry(b);
  if ((g.variant == Variant::kFat32) != fat32_layout) {
    throw Error(ErrorCode::kInconsistentBpb, std::string("cluster count implies ") +
                                                 std::string(to_string(g.variant)) +
                                                 " but BPB layout disagrees");
  }
  if (g.variant == Variant::kFat32 && total16 != 0) {
    throw Error(ErrorCode::kInconsistentBpb, "FAT32 with 16-bit sector count");
  }
  return b;
}

std::optional<std::uint32_t> planned_cluster_count(std::uint64_t sectors, Variant variant,
                                                   std::uint8_t sectors_per_cluster) {
  auto l = plan(sectors, variant, sectors_per_cluster);
  if (!l) return std::nullopt;
  return l->clusters;
}

std::shared_ptr<Volume> mkfs(std::shared_ptr<blockdev::BlockDevice> dev, Variant variant,
                             const MkfsParams& params, Clock clock) {
  if (!dev) throw Error(ErrorCode::kInvalidArgument, "no device");
  if (dev->read_only()) throw Error(ErrorCode::kReadOnlyVolume, "device is read-only");
  if (!valid_label(params.volume_label)) throw Error(ErrorCode::kNameInvalid, "label " + params.volume_label);
  const std::uint64_t sectors = std::min<std::uint64_t>(dev->sector_count(), 0xFFFFFFFFull);

  std::optional<Layout> layout;
  std::uint8_t spc = params.sectors_per_cluster;
  if (spc != 0) {
    layout = plan(sectors, variant, spc);
  } else if (variant == Variant::kFat32) {
    spc = default_fat32_spc(sectors);
    layout = plan(sectors, variant, spc);
  } else {
    for (spc = 1; spc != 0; spc = static_cast<std::uint8_t>(spc * 2)) {
      layout = plan(sectors, variant, spc);
      if (!layout || layout->clusters < kFat32MinClusters) break;
    }
    if (spc == 0) spc = 128;
  }
  if (!layout || !fits(variant, layout->clusters)) {
    std::string got = layout ? std::to_string(layout->clusters) + " clusters" : "no room for metadata";
    throw Error(ErrorCode::kVariantSizeMismatch,
                std::string(to_string(variant)) + " on " + std::to_string(sectors) +
                    " sectors at " + std::to_string(spc) + " sectors/cluster gives " + got);
  }

  auto now = clock ? clock() : std::chrono::system_clock::now();
  DosDateTime stamp = to_dos(now);
  const bool fat32 = variant == Variant::kFat32;

  BiosParameterBlock b;
  b.sectors_per_cluster = spc;
  b.reserved_sectors = layout->reserved;
  b.num_fats = 2;
  b.root_entry_count = layout->root_entries;
  b.total_sectors = static_cast<std::uint32_t>(sectors);
  b.sectors_per_fat = layout->fat_sectors;
  b.root_cluster = fat32 ? 2 : 0;
  b.fsinfo_sector = fat32 ? 1 : 0;
  b.backup_boot_sector = fat32 ? 6 : 0;
  b.volume_id = params.volume_id.value_or((static_cast<std::uint32_t>(stamp.date) << 16) |
                                          static_cast<std::uint32_t>(stamp.time + stamp.tenths));
  b.volume_label = params.volume_label;

  Bytes boot(kSectorSize, 0);
  MutableByteSpan bs(boot);
  boot[0] = 0xEB;
  boot[1] = fat32 ? 0x58 : 0x3C;
  boot[2] = 0x90;
  put_field(bs, 3, 8, b.oem_name);
  store_le16(bs, 11, b.bytes_per_sector);
  boot[13] = b.sectors_per_cluster;
  store_le16(bs, 14, b.reserved_sectors);
  boot[16] = b.num_fats;
  store_le16(bs, 17, b.root_entry_count);
  if (!fat32 && b.total_sectors < 0x10000) {
    store_le16(bs, 19, static_cast<std::uint16_t>(b.total_sectors));
  } else {
    store_le32(bs, 32, b.total_sectors);
  }
  boot[21] = b.media;
  store_le16(bs, 24, 63);
  store_le16(bs, 26, 255);
  std::size_t ext = 36;
  if (fat32) {
    store_le32(bs, 36, b.sectors_per_fat);
    store_le32(bs, 44, b.root_cluster);
    store_le16(bs, 48, b.fsinfo_sector);
    store_le16(bs, 50, b.backup_boot_sector);
    ext = 64;
  } else {
    store_le16(bs, 22, static_cast<std::uint16_t>(b.sectors_per_fat));
  }
  boot[ext] = 0x80;
  boot[ext + 2] = 0x29;
  store_le32(bs, ext + 3, b.volume_id);
  put_field(bs, ext + 7, 11, b.volume_label);
  put_field(bs, ext + 18, 8, fat32 ? "FAT32" : "FAT16");
  boot[510] = 0x55;
  boot[511] = 0xAA;

  Geometry g = derive_geometry(b);

  write_zeros(*dev, 0, b.reserved_sectors);
  dev->write(0, 1, boot);
  if (fat32) {
    Bytes info(kSectorSize, 0);
    MutableByteSpan is(info);
    store_le32(is, 0, kFsInfoLead);
    store_le32(is, 484, kFsInfoStruct);
    store_le32(is, 488, g.cluster_count - 1);
    store_le32(is, 492, 3);
    store_le32(is, 508, kFsInfoTrail);
    dev->write(b.fsinfo_sector, 1, info);
    dev->write(b.backup_boot_sector, 1, boot);
    dev->write(b.backup_boot_sector + 1u, 1, info);
  }

  write_zeros(*dev, g.first_fat_sector, static_cast<std::uint64_t>(b.num_fats) * b.sectors_per_fat);
  Bytes fat0(kSectorSize, 0);
  MutableByteSpan fs(fat0);
  if (fat32) {
    store_le32(fs, 0, 0x0FFFFF00u | b.media);
    store_le32(fs, 4, 0x0FFFFFFF);
    store_le32(fs, 8, 0x0FFFFFFF);
  } else {
    store_le16(fs, 0, static_cast<std::uint16_t>(0xFF00u | b.media));
    store_le16(fs, 2, 0xFFFF);
  }
  for (std::uint8_t i = 0; i < b.num_fats; ++i) {
    dev->write(g.first_fat_sector + static_cast<std::uint64_t>(i) * b.sectors_per_fat, 1, fat0);
  }

  std::uint64_t root_lba = fat32 ? g.cluster_to_sector(2) : g.first_root_dir_sector;
  std::uint64_t root_len = fat32 ? spc : g.root_dir_sectors;
  write_zeros(*dev, root_lba, root_len);
  if (b.volume_label != "NO NAME") {
    DirEntry label;
    label.short_name.fill(' ');
    std::copy(b.volume_label.begin(), b.volume_label.end(), label.short_name.begin());
    label.attributes = attr::kVolumeLabel;
    label.modify_date = stamp.date;
    label.modify_time = stamp.time;
    Bytes first(kSectorSize, 0);
    auto raw = label.serialize();
    std::copy(raw.begin(), raw.end(), first.begin());
    dev->write(root_lba, 1, first);
  }
  dev->flush();
  return mount(std::move(dev), std::move(clock));
}

}  // namespace usbb::fat
