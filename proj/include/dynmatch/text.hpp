#ifndef DYNMATCH_TEXT_HPP
#define DYNMATCH_TEXT_HPP

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dynmatch::text {

/// Shortest representation that parses back to the same double. NaN prints
/// as an empty string so missing cells survive a CSV round trip.
std::string format_double(double value);

std::optional<double> parse_double(std::string_view s);
std::optional<long long> parse_int(std::string_view s);

std::string_view trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char delimiter);

/// One CSV record, RFC 4180 quoting. Returns false at end of input.
bool read_csv_record(std::istream& in, std::vector<std::string>& fields);
std::string csv_escape(std::string_view field);
void write_csv_record(std::ostream& out, const std::vector<std::string>& fields);

std::string read_file(const std::string& path);

}  // namespace dynmatch::text

#endif  // DYNMATCH_TEXT_HPP
