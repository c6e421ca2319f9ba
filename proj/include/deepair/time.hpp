#pragma once

#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

namespace deepair {

using UtcSeconds = std::chrono::sys_seconds;

/// Whole UTC hour, counted from the Unix epoch.
struct UtcHour {
  std::int64_t value = 0;

  static UtcHour floor_of(UtcSeconds t) {
    return UtcHour{std::chrono::floor<std::chrono::hours>(t).time_since_epoch().count()};
  }
  UtcSeconds seconds() const { return UtcSeconds{std::chrono::hours{value}}; }
  UtcHour operator+(std::int64_t h) const { return UtcHour{value + h}; }
  std::int64_t operator-(UtcHour o) const { return value - o.value; }

  friend bool operator==(const UtcHour&, const UtcHour&) = default;
  friend auto operator<=>(const UtcHour&, const UtcHour&) = default;
};

namespace detail {

inline bool parse_fixed(std::string_view s, std::size_t pos, std::size_t len, int& out) {
  if (pos + len > s.size()) return false;
  auto first = s.data() + pos;
  auto last = first + len;
  auto [p, ec] = std::from_chars(first, last, out);
  return ec == std::errc{} && p == last;
}

}  // namespace detail

/// Parses an RFC-3339 instant: `YYYY-MM-DDTHH:MM[:SS[.frac]](Z|+HH:MM|-HH:MM)`.
/// Seconds are optional since station feeds commonly omit them.
inline std::optional<UtcSeconds> parse_rfc3339(std::string_view s) {
  using namespace std::chrono;
  int y, mo, d, h, mi, sec = 0;
  if (!detail::parse_fixed(s, 0, 4, y) || s.size() < 16 || s[4] != '-' ||
      !detail::parse_fixed(s, 5, 2, mo) || s[7] != '-' || !detail::parse_fixed(s, 8, 2, d) ||
      (s[10] != 'T' && s[10] != 't' && s[10] != ' ') || !detail::parse_fixed(s, 11, 2, h) ||
      s[13] != ':' || !detail::parse_fixed(s, 14, 2, mi)) {
    return std::nullopt;
  }
  std::size_t pos = 16;
  if (pos < s.size() && s[pos] == ':') {
    if (!detail::parse_fixed(s, pos + 1, 2, sec)) return std::nullopt;
    pos += 3;
    if (pos < s.size() && s[pos] == '.') {
      ++pos;
      while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') ++pos;
    }
  }
  if (pos >= s.size()) return std::nullopt;
  int offset_minutes = 0;
  if (s[pos] == 'Z' || s[pos] == 'z') {
    ++pos;
  } else if (s[pos] == '+' || s[pos] == '-') {
    int oh, om;
    if (!detail::parse_fixed(s, pos + 1, 2, oh) || pos + 3 >= s.size() || s[pos + 3] != ':' ||
        !detail::parse_fixed(s, pos + 4, 2, om)) {
      return std::nullopt;
    }
    offset_minutes = (oh * 60 + om) * (s[pos] == '-' ? -1 : 1);
    pos += 6;
  } else {
    return std::nullopt;
  }
  if (pos != s.size()) return std::nullopt;
  if (h > 23 || mi > 59 || sec > 60) return std::nullopt;
  year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) return std::nullopt;
  return sys_days{ymd} + hours{h} + minutes{mi} + seconds{sec} - minutes{offset_minutes};
}

inline std::string format_utc_hour(UtcHour h) {
  using namespace std::chrono;
  const auto t = h.seconds();
  const auto day_start = floor<days>(t);
  const year_month_day ymd{day_start};
  const auto hod = duration_cast<hours>(t - day_start).count();
  char buf[48];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02lld:00Z", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<long long>(hod));
  return buf;
}

inline std::optional<UtcHour> parse_utc_hour(std::string_view s) {
  auto t = parse_rfc3339(s);
  if (!t) return std::nullopt;
  return UtcHour::floor_of(*t);
}

/// Local calendar features of a UTC hour under a fixed offset (Beijing: +8).
struct LocalCalendar {
  int day_of_week = 0;  // Monday = 0 ... Sunday = 6
  int hour_of_day = 0;  // 0..23
};

inline LocalCalendar local_calendar(UtcHour h, int utc_offset_hours) {
  using namespace std::chrono;
  const auto local = h.seconds() + hours{utc_offset_hours};
  const auto day_start = floor<days>(local);
  const weekday wd{day_start};
  return LocalCalendar{static_cast<int>(wd.iso_encoding()) - 1,
                       static_cast<int>(duration_cast<hours>(local - day_start).count())};
}

}  // namespace deepair
