#include <algorithm>
#include <cstring>
#include <ctime>

#include "usbb/error.hpp"
#include "usbb/fatfs.hpp"

namespace usbb::fat {

namespace {

bool short_char_ok(char c) {
  if (c >= 'A' && c <= 'Z') return true;
  if (c >= '0' && c <= '9') return true;
  return std::strchr("!#$%&'()-@^_`{}~", c) != nullptr && c != '\0';
}

char ascii_upper(char c) { return (c >= 'a' && c <= 'z') ? static_cast<char>(c - 'a' + 'A') : c; }

std::string trim_right(std::string s) {
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

}  // namespace

std::string_view to_string(Variant variant) {
  return variant == Variant::kFat16 ? "FAT16" : "FAT32";
}

std::optional<Variant> parse_variant(std::string_view text) {
  std::string up;
  for (char c : text) up.push_back(ascii_upper(c));
  if (up == "FAT16" || up == "16") return Variant::kFat16;
  if (up == "FAT32" || up == "32") return Variant::kFat32;
  return std::nullopt;
}

std::uint8_t lfn_checksum(std::span<const std::uint8_t, 11> short_name) {
  std::uint8_t sum = 0;
  for (std::uint8_t b : short_name) {
    sum = static_cast<std::uint8_t>(((sum & 1) << 7) + (sum >> 1) + b);
  }
  return sum;
}

DosDateTime to_dos(std::chrono::system_clock::time_point tp) {
  auto secs = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  DosDateTime out;
  if (tm.tm_year < 80) return out;
  if (tm.tm_year > 207) tm.tm_year = 207;
  out.date = static_cast<std::uint16_t>(((tm.tm_year - 80) << 9) | ((tm.tm_mon + 1) << 5) | tm.tm_mday);
  out.time = static_cast<std::uint16_t>((tm.tm_hour << 11) | (tm.tm_min << 5) | (tm.tm_sec / 2));
  out.tenths = static_cast<std::uint8_t>((tm.tm_sec % 2) * 100);
  return out;
}

std::string DirEntry::short_display() const {
  std::string base(reinterpret_cast<const char*>(short_name.data()), 8);
  std::string ext(reinterpret_cast<const char*>(short_name.data()) + 8, 3);
  if (!base.empty() && static_cast<std::uint8_t>(base[0]) == 0x05) base[0] = static_cast<char>(0xE5);
  base = trim_right(base);
  ext = trim_right(ext);
  return ext.empty() ? base : base + "." + ext;
}

std::string DirEntry::name() const { return long_name.empty() ? short_display() : long_name; }

std::array<std::uint8_t, kDirEntrySize> DirEntry::serialize() const {
  std::array<std::uint8_t, kDirEntrySize> raw{};
  std::copy(short_name.begin(), short_name.end(), raw.begin());
  raw[11] = attributes;
  raw[12] = nt_reserved;
  raw[13] = create_tenths;
  MutableByteSpan s(raw);
  store_le16(s, 14, create_time);
  store_le16(s, 16, create_date);
  store_le16(s, 18, access_date);
  store_le16(s, 20, static_cast<std::uint16_t>(first_cluster >> 16));
  store_le16(s, 22, modify_time);
  store_le16(s, 24, modify_date);
  store_le16(s, 26, static_cast<std::uint16_t>(first_cluster & 0xFFFF));
  store_le32(s, 28, size_bytes);
  return raw;
}

DirEntry DirEntry::parse(ByteSpan raw) {
  DirEntry e;
  std::copy_n(raw.begin(), 11, e.short_name.begin());
  e.attributes = raw[11];
  e.nt_reserved = raw[12];
  e.create_tenths = raw[13];
  e.create_time = load_le16(raw, 14);
  e.create_date = load_le16(raw, 16);
  e.access_date = load_le16(raw, 18);
  e.modify_time = load_le16(raw, 22);
  e.modify_date = load_le16(raw, 24);
  e.first_cluster = (static_cast<std::uint32_t>(load_le16(raw, 20)) << 16) | load_le16(raw, 26);
  e.size_bytes = load_le32(raw, 28);
  return e;
}

namespace names {

bool valid_long_name(std::string_view name) {
  if (name.empty() || name == "." || name == "..") return false;
  if (name.back() == '.' || name.back() == ' ') return false;
  for (char c : name) {
    auto u = static_cast<unsigned char>(c);
    if (u < 0x20 || u == 0x7F) return false;
    if (std::strchr("\"*/:<>?\\|", c) != nullptr) return false;
  }
  std::u16string wide = utf8_to_utf16(name);
  return !wide.empty() && wide.size() <= 255;
}

bool is_plain_short_name(std::string_view name) {
  auto dot = name.find('.');
  std::string_view base = name.substr(0, dot);
  std::string_view ext = dot == std::string_view::npos ? std::string_view{} : name.substr(dot + 1);
  if (base.empty() || base.size() > 8 || ext.size() > 3) return false;
  if (dot != std::string_view::npos && ext.empty()) return false;
  return std::all_of(base.begin(), base.end(), short_char_ok) &&
         std::all_of(ext.begin(), ext.end(), short_char_ok);
}

std::array<std::uint8_t, 11> to_short_field(std::string_view plain) {
  std::array<std::uint8_t, 11> field;
  field.fill(' ');
  auto dot = plain.find('.');
  std::string_view base = plain.substr(0, dot);
  std::string_view ext = dot == std::string_view::npos ? std::string_view{} : plain.substr(dot + 1);
  std::copy(base.begin(), base.end(), field.begin());
  std::copy(ext.begin(), ext.end(), field.begin() + 8);
  return field;
}

std::pair<std::array<std::uint8_t, 11>, bool> basis_name(std::string_view long_name) {
  bool lossy = false;
  std::string cleaned;
  // Leading periods and all spaces are dropped.
  std::size_t i = 0;
  while (i < long_name.size() && long_name[i] == '.') {
    ++i;
    lossy = true;
  }
  for (; i < long_name.size(); ++i) {
    auto u = static_cast<unsigned char>(long_name[i]);
    if (long_name[i] == ' ') {
      lossy = true;
      continue;
    }
    if (u >= 0x80) {
      // One '_' per code point.
      if ((u & 0xC0) != 0x80) cleaned.push_back('_');
      lossy = true;
      continue;
    }
    char c = ascii_upper(long_name[i]);
    if (c != '.' && !short_char_ok(c)) {
      c = '_';
      lossy = true;
    }
    cleaned.push_back(c);
  }
  auto last_dot = cleaned.rfind('.');
  std::string base;
  std::string ext;
  for (std::size_t k = 0; k < cleaned.size() && k < last_dot; ++k) {
    if (cleaned[k] == '.') {
      lossy = true;
      continue;
    }
    base.push_back(cleaned[k]);
  }
  if (last_dot != std::string::npos) ext = cleaned.substr(last_dot + 1);
  if (base.size() > 8) {
    base.resize(8);
    lossy = true;
  }
  if (ext.size() > 3) {
    ext.resize(3);
    lossy = true;
  }
  if (base.empty()) {
    base = "_";
    lossy = true;
  }
  std::array<std::uint8_t, 11> field;
  field.fill(' ');
  std::copy(base.begin(), base.end(), field.begin());
  std::copy(ext.begin(), ext.end(), field.begin() + 8);
  return {field, lossy};
}

std::array<std::uint8_t, 11> with_numeric_tail(const std::array<std::uint8_t, 11>& basis,
                                                std::uint32_t n) {
  std::string tail = "~" + std::to_string(n);
  std::size_t base_len = 0;
  while (base_len < 8 && basis[base_len] != ' ') ++base_len;
  std::size_t keep = std::min(base_len, 8 - tail.size());
  auto out = basis;
  std::fill(out.begin(), out.begin() + 8, ' ');
  std::copy_n(basis.begin(), keep, out.begin());
  std::copy(tail.begin(), tail.end(), out.begin() + keep);
  return out;
}

std::u16string utf8_to_utf16(std::string_view text) {
  std::u16string out;
  std::size_t i = 0;
  while (i < text.size()) {
    auto c = static_cast<unsigned char>(text[i]);
    std::uint32_t cp = 0xFFFD;
    std::size_t len = 1;
    if (c < 0x80) {
      cp = c;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    }
    if (i + len > text.size()) break;
    for (std::size_t k = 1; k < len; ++k) {
      cp = (cp << 6) | (static_cast<unsigned char>(text[i + k]) & 0x3F);
    }
    i += len;
    if (cp >= 0x10000) {
      cp -= 0x10000;
      out.push_back(static_cast<char16_t>(0xD800 + (cp >> 10)));
      out.push_back(static_cast<char16_t>(0xDC00 + (cp & 0x3FF)));
    } else {
      out.push_back(static_cast<char16_t>(cp));
    }
  }
  return out;
}

std::string utf16_to_utf8(std::u16string_view text) {
  std::string out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    std::uint32_t cp = text[i];
    if (cp >= 0xD800 && cp < 0xDC00 && i + 1 < text.size() && text[i + 1] >= 0xDC00 &&
        text[i + 1] < 0xE000) {
      cp = 0x10000 + ((cp - 0xD800) << 10) + (text[i + 1] - 0xDC00);
      ++i;
    }
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }
  return out;
}

bool equal_ignore_case(std::string_view a, std::string_view b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (ascii_upper(a[i]) != ascii_upper(b[i])) return false;
  }
  return true;
}

std::vector<std::string> split_path(std::string_view path) {
  if (path.empty() || path.front() != '/') {
    throw Error(ErrorCode::kNameInvalid, "path must be absolute: " + std::string(path));
  }
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (pos < path.size()) {
    auto next = path.find('/', pos);
    if (next == std::string_view::npos) next = path.size();
    if (next > pos) {
      std::string part(path.substr(pos, next - pos));
      if (!valid_long_name(part)) throw Error(ErrorCode::kNameInvalid, part);
      parts.push_back(std::move(part));
    }
    pos = next + 1;
  }
  return parts;
}

}  // namespace names

}  // namespace usbb::fat
