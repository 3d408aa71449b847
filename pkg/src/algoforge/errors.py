"""Exception hierarchy shared by every subsystem."""


class AlgoforgeError(Exception):
    """Base class for all domain errors raised by this package."""


class MalformedProblem(AlgoforgeError):
    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class DuplicateSampleIndex(MalformedProblem):
    """Sample indices are duplicated or not contiguous from 1."""


class SampleIndexGap(DuplicateSampleIndex):
    pass


class MalformedCatalogLine(AlgoforgeError):
    def __init__(self, line_no, line):
        super().__init__(f"line {line_no}: expected 'tag: description', got {line!r}")
        self.line_no = line_no
        self.line = line


class NoSamplesFound(AlgoforgeError):
    pass


class UnbalancedSamples(AlgoforgeError):
    def __init__(self, inputs, outputs):
        super().__init__(f"found {inputs} input block(s) but {outputs} output block(s)")
        self.inputs = inputs
        self.outputs = outputs


class UnknownFormat(AlgoforgeError):
    pass


class IoFailure(AlgoforgeError):
    def __init__(self, path, cause):
        super().__init__(f"{path}: {cause}")
        self.path = path
        self.cause = cause


class SandboxUnavailable(AlgoforgeError):
    pass


class CompilationError(AlgoforgeError):
    def __init__(self, diagnostic):
        super().__init__("compilation failed")
        self.diagnostic = diagnostic


class MissingBinding(AlgoforgeError):
    def __init__(self, names):
        names = sorted(names)
        super().__init__("missing binding(s): " + ", ".join(names))
        self.names = names


class UnknownPlaceholder(AlgoforgeError):
    def __init__(self, names):
        names = sorted(names)
        super().__init__("unknown placeholder(s): " + ", ".join(names))
        self.names = names


class ProviderError(AlgoforgeError):
    pass


class ScriptExhausted(AlgoforgeError):
    def __init__(self, agent, iteration, occurrence):
        super().__init__(f"no scripted response for {agent} iteration {iteration} occurrence {occurrence}")
        self.key = (agent, iteration, occurrence)


class LiveCallRefused(ProviderError):
    """Raised when a live provider call is attempted in offline mode."""


class EmptyCorpus(AlgoforgeError):
    pass


class EmbeddingBackendMismatch(AlgoforgeError):
    pass


class ParseError(AlgoforgeError):
    """Base for structured-output parse failures; triggers parse retries."""


class NoOptionsParsed(ParseError):
    pass


class NoPlanParsed(ParseError):
    pass


class NoCodeFound(ParseError):
    pass


class NoSignalParsed(ParseError):
    pass


class UnknownSignal(ParseError):
    def __init__(self, token):
        super().__init__(f"unknown control signal {token!r}")
        self.token = token


class StageFailed(AlgoforgeError):
    def __init__(self, stage, attempts, last_error=None):
        super().__init__(f"{stage} failed after {attempts} attempt(s): {last_error}")
        self.stage = stage
        self.attempts = attempts
        self.last_error = last_error


class SelectionFailed(StageFailed):
    pass


class ReasoningFailed(StageFailed):
    pass


class ImplementationFailed(StageFailed):
    pass


class CheckFailed(StageFailed):
    pass


class MissingOverrideFixture(AlgoforgeError):
    pass


class ZeroTotal(AlgoforgeError):
    def __init__(self, problem_id):
        super().__init__(f"record {problem_id!r} has total = 0")
        self.problem_id = problem_id


class MissingSection(ParseError):
    def __init__(self, section):
        super().__init__(f"missing or empty section {section!r}")
        self.section = section
